"""Command-line entry point.

Subcommands: train-ucbfair, run-greedy, serve, phase-portrait, oracle,
fit-features, report. Runs are described by one TOML/JSON config file or a
named preset; --seed and --output override those fields without editing
the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from fairdyn.core import ConfigError, FairdynError, PopulationState
from fairdyn.env import FairnessEnv
from fairdyn.features import ADULT_SCHEMA, build_empirical_model, ingest_dataset
from fairdyn.featuremap import TrainResult
from fairdyn.greedy import GreedyAgent, GreedyConfig
from fairdyn.harness import (
    ExperimentConfig,
    build_env,
    load_config,
    phase_portrait,
    run_experiment,
    sliding_stats,
)
from fairdyn.metrics import oracle_optimal_value
from fairdyn.presets import PRESETS, preset_config
from fairdyn.server import serve_stdio, serve_tcp
from fairdyn.ucbfair import UcbFairAgent
from fairdyn.voronoi import build_grid_cover


def _add_config_args(p: argparse.ArgumentParser) -> None:
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="TOML or JSON run description")
    group.add_argument("--preset", choices=sorted(PRESETS), help="named built-in run")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--output", default=None, help="override the output directory")


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.preset is not None:
        return preset_config(args.preset, seed=args.seed, output_dir=args.output)
    config = load_config(args.config)
    payload = config.to_dict()
    # strip the nested utility envelope back to plain numbers for reparse
    payload["environment"]["utility"] = {
        k: v
        for k, v in payload["environment"]["utility"].items()
        if k not in ("fairdyn_schema", "kind")
    }
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.output is not None:
        payload["output"]["directory"] = args.output
    return ExperimentConfig.from_dict(payload)


def _require_agent_kind(config: ExperimentConfig, expected: str) -> None:
    if config.agent_kind != expected:
        raise ConfigError(
            f"this subcommand runs the {expected!r} agent but the config "
            f"declares {config.agent_kind!r}"
        )


def _cmd_train_ucbfair(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    _require_agent_kind(config, "ucbfair")
    manifest = run_experiment(config)
    print(f"wrote {', '.join(manifest['artifacts'])} to {config.output_dir}")
    return 0


def _cmd_run_greedy(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    _require_agent_kind(config, "greedy")
    manifest = run_experiment(config)
    print(f"wrote {', '.join(manifest['artifacts'])} to {config.output_dir}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    env = build_env(config)
    if args.stdio:
        serve_stdio(env, seed=config.seed)
    else:
        serve_tcp(env, host=args.host, port=args.port, seed=config.seed)
    return 0


def _load_ucbfair_checkpoint(config: ExperimentConfig, run_dir: Path) -> UcbFairAgent:
    features_path = run_dir / "features.fdyn"
    checkpoint_path = run_dir / "checkpoint.fdyn"
    for p in (features_path, checkpoint_path):
        if not p.exists():
            raise ConfigError(f"checkpoint artifact missing: {p}")
    fit = TrainResult.load(features_path)
    space = build_grid_cover(
        dims=config.group_spec.group_count,
        epsilon=float(config.agent_options["epsilon"]),
    )
    return UcbFairAgent.load(checkpoint_path, fit.feature_map.phi, space)


def _cmd_phase_portrait(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    env = build_env(config)
    if config.agent_kind == "greedy":
        opts = config.agent_options
        agent = GreedyAgent(
            env,
            GreedyConfig(
                lam=float(opts["lam"]),
                step_size=float(opts["step_size"]),
                descent_steps=int(opts["descent_steps"]),
                restarts=int(opts["restarts"]),
            ),
        )
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint RUN_DIR is required for a ucbfair portrait")
        agent = _load_ucbfair_checkpoint(config, Path(args.checkpoint))
    grid = phase_portrait(
        env,
        agent,
        points=args.points or config.portrait_points,
        rollouts=args.rollouts or config.portrait_rollouts,
        seed=config.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.to_csv(out)
    print(f"wrote {out}")
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    env = build_env(config)
    start = None
    if args.state is not None:
        parts = [float(v) for v in args.state.split(",")]
        if len(parts) != env.n_groups:
            raise ConfigError(f"--state needs {env.n_groups} comma-separated rates")
        start = PopulationState(tuple(parts))
    solution = oracle_optimal_value(
        env,
        horizon=config.episode.horizon,
        constraint_level=config.episode.constraint_level,
        state_points=args.state_points,
        threshold_points=args.threshold_points,
        start_state=start,
    )
    if not solution.feasible:
        print("infeasible:")
        print(solution.report)
        return 1
    print(f"optimal constrained value: {solution.value!r}")
    if start is not None:
        rates = ",".join(repr(float(v)) for v in start.qualification_rates)
        print(f"value at start ({rates}): {solution.value_at(start)!r}")
    if args.csv is not None:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["q1", "q2", "value"])
            axis = solution.q_axis
            for i in range(axis.shape[0]):
                for j in range(axis.shape[0]):
                    writer.writerow(
                        [
                            repr(float(axis[i])),
                            repr(float(axis[j])),
                            repr(float(solution.value_table[i, j])),
                        ]
                    )
        print(f"wrote {path}")
    return 0


def _cmd_fit_features(args: argparse.Namespace) -> int:
    dataset = ingest_dataset(args.data, ADULT_SCHEMA)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model = build_empirical_model(dataset, bins=args.bins, cache_path=out)
    print(f"model {model.model_ref}: groups {list(model.group_names)}, bins {model.bins}")
    print(f"wrote {out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    curves_path = run_dir / "curves.csv"
    ledger_path = run_dir / "ledger.csv"
    for p in (curves_path, ledger_path):
        if not p.exists():
            raise ConfigError(f"missing artifact: {p}")
    with open(curves_path, newline="", encoding="utf-8") as fh:
        curves = list(csv.DictReader(fh))
    with open(ledger_path, newline="", encoding="utf-8") as fh:
        ledger = list(csv.DictReader(fh))
    if not curves or not ledger:
        raise ConfigError("artifacts are empty")

    losses = [float(r["mean_loss"]) for r in curves]
    disps = [float(r["mean_disparity"]) for r in curves]
    window = min(args.window, len(losses))
    loss_mean, loss_std = sliding_stats(losses, window)
    disp_mean, disp_std = sliding_stats(disps, window)
    last = ledger[-1]
    print(f"episodes: {len(curves)}")
    print(
        f"final {window}-episode loss: {loss_mean[-1]:.4f} +/- {loss_std[-1]:.4f}; "
        f"disparity: {disp_mean[-1]:.4f} +/- {disp_std[-1]:.4f}"
    )
    print(f"final v_r: {float(last['v_r']):.4f}, v_g: {float(last['v_g']):.4f}")
    if last["regret_cum"]:
        print(f"cumulative regret: {float(last['regret_cum']):.4f}")
    print(f"cumulative distortion: {float(last['distortion_cum']):.4f}")
    mean_final_q = sum(
        (float(r["final_q1"]) + float(r["final_q2"])) / 2.0 for r in curves[-window:]
    ) / window
    print(f"mean final qualification over last {window} episodes: {mean_final_q:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairdyn",
        description="population-dynamics fairness simulator and learners",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ucbfair", help="train the optimistic constrained learner")
    _add_config_args(p)
    p.set_defaults(func=_cmd_train_ucbfair)

    p = sub.add_parser("run-greedy", help="run the myopic baseline")
    _add_config_args(p)
    p.set_defaults(func=_cmd_run_greedy)

    p = sub.add_parser("serve", help="serve the environment over the wire protocol")
    _add_config_args(p)
    p.add_argument("--stdio", action="store_true", help="speak over stdin/stdout")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="TCP port (0 picks one)")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("phase-portrait", help="sweep a frozen agent over the state grid")
    _add_config_args(p)
    p.add_argument("--checkpoint", default=None, help="run dir with agent binaries")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--out", default="portrait.csv")
    p.set_defaults(func=_cmd_phase_portrait)

    p = sub.add_parser("oracle", help="constrained planning oracle on the state grid")
    _add_config_args(p)
    p.add_argument("--state", default=None, help="start state as q1,q2")
    p.add_argument("--state-points", type=int, default=33)
    p.add_argument("--threshold-points", type=int, default=65)
    p.add_argument("--csv", default=None, help="write the value table here")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("fit-features", help="fit the data-driven score model")
    p.add_argument("--data", required=True, help="labeled CSV in the census schema")
    p.add_argument("--out", required=True, help="model JSON output path")
    p.add_argument("--bins", type=int, default=32)
    p.set_defaults(func=_cmd_fit_features)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FairdynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
