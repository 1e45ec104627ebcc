"""Experiment harness: validated configs, portraits, curves, and bundles.

A run is described by one TOML or JSON file (unknown keys anywhere are
rejected), and produces a reproducible artifact bundle: a regret/distortion
ledger CSV, a training-curve CSV, a phase-portrait CSV, and a JSON manifest
with the config hash and versions. All randomness derives from the config
seed through labeled streams, so a rerun yields byte-identical CSVs.
"""

from __future__ import annotations

import csv
import json
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from fairdyn import __version__
from fairdyn.core import (
    ConfigError,
    EpisodeConfig,
    GroupSpec,
    PopulationState,
    ValidationError,
    json_dumps,
    seed_rng,
    stable_hash,
)
from fairdyn.dynamics import DEFAULT_UTILITY, UtilityMatrix
from fairdyn.env import FairnessEnv, run_episode
from fairdyn.features import EmpiricalScoreModel
from fairdyn.featuremap import (
    FeatureMapConfig,
    OptConfig,
    collect_rollouts,
    train_feature_map,
)
from fairdyn.greedy import GreedyAgent, GreedyConfig
from fairdyn.metrics import DisparityKind, LossSpec, RegretLedger
from fairdyn.ucbfair import UcbFairAgent, UcbFairConfig
from fairdyn.voronoi import build_grid_cover

# -- configuration ------------------------------------------------------------

_TOP_KEYS = {"seed", "disparity_kind", "environment", "loss", "episode", "agent", "portrait", "output"}
_ENV_KEYS = {"model", "fractions", "utility"}
_UTILITY_KEYS = {"accept_qualified", "accept_unqualified", "reject_qualified", "reject_unqualified"}
_LOSS_KEYS = {"alpha", "beta", "legacy_sign"}
_EPISODE_KEYS = {"horizon", "episodes", "constraint_level", "initial_states"}
_PORTRAIT_KEYS = {"points", "rollouts"}
_OUTPUT_KEYS = {"directory", "curve_window"}
_AGENT_KEYS = {
    "ucbfair": {
        "kind",
        "epsilon",
        "feature_dim",
        "hidden",
        "rollout_samples",
        "feature_epochs",
        "temperature",
        "bonus",
        "bonus_c1",
        "dual_ceiling",
        "dual_step",
        "ridge",
        "history_cap",
        "refactor_every",
    },
    "greedy": {"kind", "lam", "step_size", "descent_steps", "restarts"},
}

_UCBFAIR_DEFAULTS = {
    "epsilon": 0.36,
    "feature_dim": 16,
    "hidden": (64, 32),
    "rollout_samples": 8192,
    "feature_epochs": 30,
    "temperature": None,
    "bonus": None,
    "bonus_c1": 1.0,
    "dual_ceiling": 10.0,
    "dual_step": None,
    "ridge": 1.0,
    "history_cap": 5000,
    "refactor_every": 64,
}
_GREEDY_DEFAULTS = {"lam": 0.5, "step_size": 0.05, "descent_steps": 200, "restarts": 3}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {where}")


def _parse_initial_states(raw, group_count: int) -> tuple:
    """Validate [episode].initial_states: a list of per-group rate vectors."""
    if not isinstance(raw, (list, tuple)) or not raw:
        raise ConfigError("initial_states must be a non-empty list of rate vectors")
    states = []
    for entry in raw:
        if not isinstance(entry, (list, tuple)) or len(entry) != group_count:
            raise ConfigError(
                f"each initial state needs {group_count} qualification rates, "
                f"got {entry!r}"
            )
        try:
            rates = tuple(float(v) for v in entry)
        except (TypeError, ValueError):
            raise ConfigError(
                f"qualification rates must be numbers, got {entry!r}"
            ) from None
        if any(not 0.0 <= v <= 1.0 for v in rates):
            raise ConfigError(f"qualification rates must lie in [0, 1], got {entry!r}")
        states.append(rates)
    return tuple(states)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully validated description of one run."""

    seed: int
    disparity_kind: DisparityKind
    environment_model: str
    group_spec: GroupSpec
    utility: UtilityMatrix
    loss_spec: LossSpec
    episode: EpisodeConfig
    agent_kind: str
    agent_options: dict
    portrait_points: int
    portrait_rollouts: int
    output_dir: str
    curve_window: int
    # fixed episode starts, cycled over the run; None draws from the env
    initial_states: tuple = None

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config root must be a table/object")
        _check_keys(payload, _TOP_KEYS, "config root")

        env_sec = dict(payload.get("environment", {}))
        _check_keys(env_sec, _ENV_KEYS, "[environment]")
        model = str(env_sec.get("model", "gaussian"))
        fractions = tuple(env_sec.get("fractions", (0.5, 0.5)))
        group_spec = GroupSpec(len(fractions), fractions)
        utility_sec = dict(env_sec.get("utility", {}))
        _check_keys(utility_sec, _UTILITY_KEYS, "[environment.utility]")
        utility = (
            UtilityMatrix(**{k: float(v) for k, v in utility_sec.items()})
            if utility_sec
            else DEFAULT_UTILITY
        )

        loss_sec = dict(payload.get("loss", {}))
        _check_keys(loss_sec, _LOSS_KEYS, "[loss]")
        loss_spec = LossSpec(
            alpha=float(loss_sec.get("alpha", 1.0)),
            beta=float(loss_sec.get("beta", 0.0)),
            legacy_sign=bool(loss_sec.get("legacy_sign", False)),
        )

        episode_sec = dict(payload.get("episode", {}))
        _check_keys(episode_sec, _EPISODE_KEYS, "[episode]")
        seed = int(payload.get("seed", 0))
        episode = EpisodeConfig(
            horizon=int(episode_sec.get("horizon", 100)),
            episode_count=int(episode_sec.get("episodes", 100)),
            constraint_level=float(episode_sec.get("constraint_level", 0.0)),
            seed=seed,
        )
        initial_states = episode_sec.get("initial_states")
        if initial_states is not None:
            initial_states = _parse_initial_states(initial_states, len(fractions))

        agent_sec = dict(payload.get("agent", {}))
        kind = str(agent_sec.get("kind", "ucbfair"))
        if kind not in _AGENT_KEYS:
            raise ConfigError(f"agent kind must be one of {sorted(_AGENT_KEYS)}, got {kind!r}")
        _check_keys(agent_sec, _AGENT_KEYS[kind], "[agent]")
        defaults = _UCBFAIR_DEFAULTS if kind == "ucbfair" else _GREEDY_DEFAULTS
        options = dict(defaults)
        for key, value in agent_sec.items():
            if key != "kind":
                options[key] = value

        portrait_sec = dict(payload.get("portrait", {}))
        _check_keys(portrait_sec, _PORTRAIT_KEYS, "[portrait]")
        points = int(portrait_sec.get("points", 9))
        rollouts = int(portrait_sec.get("rollouts", 20))
        if points < 2 or rollouts < 1:
            raise ConfigError("portrait needs points >= 2 and rollouts >= 1")

        output_sec = dict(payload.get("output", {}))
        _check_keys(output_sec, _OUTPUT_KEYS, "[output]")
        directory = str(output_sec.get("directory", "runs/out"))
        window = int(output_sec.get("curve_window", 20))
        if window < 1:
            raise ConfigError("curve_window must be >= 1")

        return cls(
            seed=seed,
            disparity_kind=DisparityKind.parse(payload.get("disparity_kind", "dp")),
            environment_model=model,
            group_spec=group_spec,
            utility=utility,
            loss_spec=loss_spec,
            episode=episode,
            agent_kind=kind,
            agent_options=options,
            portrait_points=points,
            portrait_rollouts=rollouts,
            output_dir=directory,
            curve_window=window,
            initial_states=initial_states,
        )

    def to_dict(self) -> dict:
        """Canonical dict form (used for hashing and the manifest)."""
        episode_sec = {
            "horizon": self.episode.horizon,
            "episodes": self.episode.episode_count,
            "constraint_level": self.episode.constraint_level,
        }
        if self.initial_states is not None:
            episode_sec["initial_states"] = [list(q) for q in self.initial_states]
        return {
            "seed": self.seed,
            "disparity_kind": self.disparity_kind.value,
            "environment": {
                "model": self.environment_model,
                "fractions": list(self.group_spec.group_fractions),
                "utility": self.utility.to_json(),
            },
            "loss": {
                "alpha": self.loss_spec.alpha,
                "beta": self.loss_spec.beta,
                "legacy_sign": self.loss_spec.legacy_sign,
            },
            "episode": episode_sec,
            "agent": {"kind": self.agent_kind, **_jsonable(self.agent_options)},
            "portrait": {"points": self.portrait_points, "rollouts": self.portrait_rollouts},
            "output": {"directory": self.output_dir, "curve_window": self.curve_window},
        }


def _jsonable(options: dict) -> dict:
    out = {}
    for k, v in options.items():
        if isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a TOML (.toml) or JSON (.json) config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            payload = tomllib.load(fh)
    elif p.suffix == ".json":
        with open(p, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    else:
        raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")
    return ExperimentConfig.from_dict(payload)


def build_env(config: ExperimentConfig) -> FairnessEnv:
    """Instantiate the environment a config describes."""
    model = config.environment_model
    if model != "gaussian":
        path = Path(model)
        if not path.exists():
            raise ConfigError(f"feature model file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            model = EmpiricalScoreModel.from_json(json.load(fh))
    return FairnessEnv(
        group_spec=config.group_spec,
        model=model,
        utility=config.utility,
        loss_spec=config.loss_spec,
        disparity_kind=config.disparity_kind,
        horizon=config.episode.horizon,
    )


# -- sliding statistics -------------------------------------------------------


def sliding_stats(series, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window mean and population std of a 1-D series.

    The first window-1 entries use whatever prefix is available, so the
    output has the same length as the input.
    """
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("series must be one-dimensional")
    means = np.empty_like(x)
    stds = np.empty_like(x)
    for t in range(x.shape[0]):
        seg = x[max(0, t - window + 1) : t + 1]
        means[t] = seg.mean()
        stds[t] = seg.std()
    return means, stds


# -- phase portrait -------------------------------------------------------------


@dataclass(frozen=True)
class PhasePortraitGrid:
    """Mean one-step displacement field with a disparity shade per cell.

    ``axis`` holds the shared per-axis grid over [0, 1]; entry [i, j] of
    the fields corresponds to the state (q1, q2) = (axis[i], axis[j]).
    """

    axis: np.ndarray
    dq1: np.ndarray
    dq2: np.ndarray
    disparity: np.ndarray
    rollouts: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["q1", "q2", "dq1", "dq2", "mean_disparity"])
            p = self.axis.shape[0]
            for i in range(p):
                for j in range(p):
                    writer.writerow(
                        [
                            repr(float(self.axis[i])),
                            repr(float(self.axis[j])),
                            repr(float(self.dq1[i, j])),
                            repr(float(self.dq2[i, j])),
                            repr(float(self.disparity[i, j])),
                        ]
                    )


def phase_portrait(
    env: FairnessEnv,
    agent,
    points: int = 9,
    rollouts: int = 20,
    seed: int = 0,
) -> PhasePortraitGrid:
    """Average one-step displacements of a frozen agent over a state grid.

    Each cell gets its own seed-derived RNG stream, so results do not
    depend on sweep order and cells could be evaluated in parallel.
    """
    if points < 2 or rollouts < 1:
        raise ValidationError("need points >= 2 and rollouts >= 1")
    axis = np.linspace(0.0, 1.0, points)
    dq1 = np.zeros((points, points))
    dq2 = np.zeros((points, points))
    disp = np.zeros((points, points))
    for i in range(points):
        for j in range(points):
            state = PopulationState((float(axis[i]), float(axis[j])), env.model_ref)
            cell_rng = seed_rng(seed, f"portrait/{i},{j}")
            delta = np.zeros(2)
            d_sum = 0.0
            for _ in range(rollouts):
                action = agent.act(state, 1, cell_rng)
                _, step_disp, _ = env.step_metrics(state, action)
                nxt = env.transition(state, action)
                delta += nxt.as_array() - state.as_array()
                d_sum += step_disp
            dq1[i, j] = delta[0] / rollouts
            dq2[i, j] = delta[1] / rollouts
            disp[i, j] = d_sum / rollouts
    return PhasePortraitGrid(axis=axis, dq1=dq1, dq2=dq2, disparity=disp, rollouts=rollouts)


# -- experiment bundle ----------------------------------------------------------


def _write_curves_csv(path: Path, columns: dict, window: int) -> None:
    """Training-curve CSV with trailing sliding stats appended."""
    loss_mean, loss_std = sliding_stats(columns["mean_loss"], window)
    disp_mean, disp_std = sliding_stats(columns["mean_disparity"], window)
    n = len(columns["episode"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "episode",
                "mean_loss",
                "mean_disparity",
                "v_r",
                "v_g",
                "est_v_r",
                "est_v_g",
                "nu",
                "final_q1",
                "final_q2",
                "sliding_mean_loss",
                "sliding_std_loss",
                "sliding_mean_disparity",
                "sliding_std_disparity",
            ]
        )
        for i in range(n):
            est_v_r = columns["est_v_r"][i] if columns["est_v_r"] else None
            est_v_g = columns["est_v_g"][i] if columns["est_v_g"] else None
            nu = columns["nu"][i] if columns["nu"] else None
            writer.writerow(
                [
                    columns["episode"][i],
                    repr(columns["mean_loss"][i]),
                    repr(columns["mean_disparity"][i]),
                    repr(columns["v_r"][i]),
                    repr(columns["v_g"][i]),
                    "" if est_v_r is None else repr(est_v_r),
                    "" if est_v_g is None else repr(est_v_g),
                    "" if nu is None else repr(nu),
                    repr(columns["final_q1"][i]),
                    repr(columns["final_q2"][i]),
                    repr(float(loss_mean[i])),
                    repr(float(loss_std[i])),
                    repr(float(disp_mean[i])),
                    repr(float(disp_std[i])),
                ]
            )


def _run_ucbfair(config: ExperimentConfig, env: FairnessEnv, out_dir: Path):
    opts = config.agent_options
    n = env.n_groups
    rollout_rng = seed_rng(config.seed, "harness/rollouts")
    buffer = collect_rollouts(env, int(opts["rollout_samples"]), rollout_rng)
    fm_config = FeatureMapConfig(
        input_dim=2 * n,
        hidden=tuple(int(h) for h in opts["hidden"]),
        output_dim=int(opts["feature_dim"]),
    )
    fit = train_feature_map(
        buffer,
        fm_config,
        OptConfig(epochs=int(opts["feature_epochs"])),
        rng=seed_rng(config.seed, "harness/featuremap"),
    )
    fit.save(out_dir / "features.fdyn")

    space = build_grid_cover(dims=n, epsilon=float(opts["epsilon"]))
    agent_config = UcbFairConfig(
        horizon=config.episode.horizon,
        episodes=config.episode.episode_count,
        constraint_level=config.episode.constraint_level,
        dual_ceiling=float(opts["dual_ceiling"]),
        dual_step=None if opts["dual_step"] is None else float(opts["dual_step"]),
        temperature=None if opts["temperature"] is None else float(opts["temperature"]),
        bonus=None if opts["bonus"] is None else float(opts["bonus"]),
        bonus_c1=float(opts["bonus_c1"]),
        ridge=float(opts["ridge"]),
        history_cap=int(opts["history_cap"]),
        refactor_every=int(opts["refactor_every"]),
    )
    agent = UcbFairAgent(fit.feature_map.phi, space, agent_config, state_dim=n)
    starts = None
    if config.initial_states is not None:
        starts = [PopulationState(q) for q in config.initial_states]
    train_out = agent.train(
        env, rng=seed_rng(config.seed, "harness/train"), initial_states=starts
    )
    agent.save(out_dir / "checkpoint.fdyn", include_history=False)

    columns = {
        "episode": train_out.episodes,
        "mean_loss": train_out.mean_loss,
        "mean_disparity": train_out.mean_disparity,
        "v_r": train_out.ledger.achieved_v_r,
        "v_g": train_out.ledger.achieved_v_g,
        "est_v_r": train_out.est_v_r1,
        "est_v_g": train_out.est_v_g1,
        "nu": train_out.nu,
        "final_q1": [s[0] for s in train_out.final_states],
        "final_q2": [s[1] for s in train_out.final_states],
    }
    extra = ["features.fdyn", "checkpoint.fdyn"]
    return agent, train_out.ledger, columns, extra


def _run_greedy(config: ExperimentConfig, env: FairnessEnv, out_dir: Path):
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
    ledger = RegretLedger(constraint_level=config.episode.constraint_level)
    horizon = config.episode.horizon
    columns = {
        "episode": [],
        "mean_loss": [],
        "mean_disparity": [],
        "v_r": [],
        "v_g": [],
        "est_v_r": [],
        "est_v_g": [],
        "nu": [],
        "final_q1": [],
        "final_q2": [],
    }
    starts = None
    if config.initial_states is not None:
        starts = [PopulationState(q) for q in config.initial_states]
    for k in range(1, config.episode.episode_count + 1):
        rng = seed_rng(config.seed, f"harness/greedy/{k}")
        start = None if starts is None else starts[(k - 1) % len(starts)]
        record = run_episode(env, agent, rng, initial_state=start)
        ledger.update(record.total_reward, record.total_utility)
        last = record.steps[-1]
        final_state = env.transition(last.state, last.action)
        columns["episode"].append(k)
        columns["mean_loss"].append(1.0 - record.total_reward / horizon)
        columns["mean_disparity"].append(1.0 - record.total_utility / horizon)
        columns["v_r"].append(record.total_reward)
        columns["v_g"].append(record.total_utility)
        columns["final_q1"].append(final_state.qualification_rates[0])
        columns["final_q2"].append(final_state.qualification_rates[1])
    return agent, ledger, columns, []


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute one configured run and write the artifact bundle.

    Returns the manifest dict (also written to manifest.json). Artifacts:
    ledger.csv, curves.csv, portrait.csv, manifest.json, plus agent
    binaries for learning agents.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = build_env(config)

    if config.agent_kind == "ucbfair":
        agent, ledger, columns, extra = _run_ucbfair(config, env, out_dir)
    else:
        agent, ledger, columns, extra = _run_greedy(config, env, out_dir)

    ledger.to_csv(out_dir / "ledger.csv")
    _write_curves_csv(out_dir / "curves.csv", columns, config.curve_window)
    portrait = phase_portrait(
        env,
        agent,
        points=config.portrait_points,
        rollouts=config.portrait_rollouts,
        seed=config.seed,
    )
    portrait.to_csv(out_dir / "portrait.csv")

    manifest = {
        "fairdyn_schema": 1,
        "config": config.to_dict(),
        "config_hash": stable_hash(config.to_dict()),
        "seed": config.seed,
        "versions": {
            "fairdyn": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "artifacts": sorted(["ledger.csv", "curves.csv", "portrait.csv"] + extra),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(json_dumps(manifest) + "\n")
    return manifest
