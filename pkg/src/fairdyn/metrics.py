"""Loss and disparity functionals, value accounting, and the DP oracle.

The institution's per-step loss is 1 - alpha*tp - beta*tn; disparity is a
squared-gap group fairness measure in [0, 1]. Episode values accumulate
these over a horizon; the regret ledger tracks cumulative regret against
an oracle and cumulative constraint distortion. The oracle itself is a
constrained dynamic program over a discretized state/threshold grid,
tracking a quantized utility budget so the fairness constraint binds
conservatively.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fairdyn.core import (
    ConfigError,
    PopulationState,
    StepRecord,
    ValidationError,
)
from fairdyn.features import OutcomeRates


@dataclass(frozen=True)
class LossSpec:
    """Weights of the true-positive and true-negative rates in the loss.

    tp and tn are disjoint joint masses, so tp + tn <= 1 identically and
    1 - alpha*tp - beta*tn stays in [0, 1] for any weights in the unit
    interval; alpha = beta = 1 is the zero-one loss. ``legacy_sign``
    switches to the printed variant 1 - alpha*tp + beta*tn (clipped into
    [0, 1]) for fidelity experiments.
    """

    alpha: float = 1.0
    beta: float = 0.0
    legacy_sign: bool = False

    def __post_init__(self) -> None:
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "legacy_sign": self.legacy_sign}

    @classmethod
    def from_json(cls, payload: dict) -> "LossSpec":
        return cls(
            float(payload["alpha"]),
            float(payload["beta"]),
            bool(payload.get("legacy_sign", False)),
        )


class DisparityKind(enum.Enum):
    """Group-fairness criterion whose squared gap defines the disparity."""

    DP = "dp"
    EOP = "eop"
    EO = "eo"
    QR = "qr"

    @classmethod
    def parse(cls, value: "DisparityKind | str") -> "DisparityKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(value.lower())
        except ValueError as exc:
            raise ConfigError(
                f"unknown disparity kind {value!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from exc


def loss(spec: LossSpec, rates: OutcomeRates) -> float:
    """Institution loss at one (state, action) pair."""
    if spec.legacy_sign:
        return float(min(max(1.0 - spec.alpha * rates.tp + spec.beta * rates.tn, 0.0), 1.0))
    return 1.0 - spec.alpha * rates.tp - spec.beta * rates.tn


def disparity(kind: DisparityKind | str, rates: OutcomeRates) -> float:
    """Squared-gap disparity between the two groups, in [0, 1].

    DP compares acceptance rates, EOp the qualified acceptance rates, QR
    the qualification rates; EO sums the squared gap of both conditional
    acceptance rates, halved. Only two-group populations are supported.
    """
    kind = DisparityKind.parse(kind)
    if rates.qualification_rates.shape[0] != 2:
        raise ConfigError(
            f"disparity requires exactly 2 groups, got {rates.qualification_rates.shape[0]}"
        )
    if kind is DisparityKind.DP:
        gap = rates.acceptance_rate[0] - rates.acceptance_rate[1]
        return float(gap * gap / 2.0)
    if kind is DisparityKind.EOP:
        gap = rates.accept_given_qualified[0] - rates.accept_given_qualified[1]
        return float(gap * gap / 2.0)
    if kind is DisparityKind.QR:
        gap = rates.qualification_rates[0] - rates.qualification_rates[1]
        return float(gap * gap / 2.0)
    gap_q = rates.accept_given_qualified[0] - rates.accept_given_qualified[1]
    gap_u = rates.accept_given_unqualified[0] - rates.accept_given_unqualified[1]
    return float((gap_q * gap_q + gap_u * gap_u) / 2.0)


def reward(spec: LossSpec, rates: OutcomeRates) -> float:
    return 1.0 - loss(spec, rates)


def utility(kind: DisparityKind | str, rates: OutcomeRates) -> float:
    return 1.0 - disparity(kind, rates)


def episode_values(trace: Sequence[StepRecord]) -> tuple[float, float]:
    """Realized (V_r, V_g) sums over an episode trace."""
    if len(trace) == 0:
        raise ValidationError("episode trace must be nonempty")
    v_r = math.fsum(step.reward for step in trace)
    v_g = math.fsum(step.utility for step in trace)
    return v_r, v_g


# ---------------------------------------------------------------------------
# Regret / distortion ledger
# ---------------------------------------------------------------------------


@dataclass
class RegretLedger:
    """Per-episode values plus running regret and distortion.

    Regret accumulates oracle minus achieved reward value; distortion is
    max(0, sum of constraint slack deficits) with the clip applied after
    the sum, so early surplus can absorb later violations. Episodes without
    an oracle value leave the regret column empty.
    """

    constraint_level: float
    episodes: list[int] = field(default_factory=list)
    achieved_v_r: list[float] = field(default_factory=list)
    achieved_v_g: list[float] = field(default_factory=list)
    oracle_values: list[float | None] = field(default_factory=list)
    regret_cum: list[float | None] = field(default_factory=list)
    distortion_cum: list[float] = field(default_factory=list)
    _regret_sum: float = 0.0
    _slack_sum: float = 0.0

    def update(self, v_r: float, v_g: float, oracle_value: float | None = None) -> None:
        episode = len(self.episodes) + 1
        self.episodes.append(episode)
        self.achieved_v_r.append(float(v_r))
        self.achieved_v_g.append(float(v_g))
        self.oracle_values.append(None if oracle_value is None else float(oracle_value))
        if oracle_value is None:
            self.regret_cum.append(None)
        else:
            self._regret_sum += float(oracle_value) - float(v_r)
            self.regret_cum.append(self._regret_sum)
        self._slack_sum += self.constraint_level - float(v_g)
        self.distortion_cum.append(max(0.0, self._slack_sum))

    def __len__(self) -> int:
        return len(self.episodes)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "v_r", "v_g", "oracle", "regret_cum", "distortion_cum"])
            for i in range(len(self.episodes)):
                writer.writerow(
                    [
                        self.episodes[i],
                        repr(self.achieved_v_r[i]),
                        repr(self.achieved_v_g[i]),
                        "" if self.oracle_values[i] is None else repr(self.oracle_values[i]),
                        "" if self.regret_cum[i] is None else repr(self.regret_cum[i]),
                        repr(self.distortion_cum[i]),
                    ]
                )


def update_ledger(
    ledger: RegretLedger,
    episode_values_pair: tuple[float, float],
    oracle_value: float | None = None,
) -> RegretLedger:
    """Functional-style wrapper over :meth:`RegretLedger.update`."""
    v_r, v_g = episode_values_pair
    ledger.update(v_r, v_g, oracle_value)
    return ledger


# ---------------------------------------------------------------------------
# Constrained DP oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleSolution:
    """Result of the constrained dynamic program.

    When infeasible, ``value`` and ``threshold_sequence`` are None and
    ``report`` explains at which resolution feasibility failed. The value
    table covers every grid cell at the full budget so per-episode initial
    states can be scored via :meth:`value_at`.
    """

    feasible: bool
    value: float | None
    threshold_sequence: np.ndarray | None
    report: str
    q_axis: np.ndarray
    value_table: np.ndarray
    constraint_level: float
    horizon: int

    def value_at(self, state: PopulationState | np.ndarray) -> float:
        """Oracle value at the grid cell nearest to ``state``."""
        q = state.as_array() if isinstance(state, PopulationState) else np.asarray(state)
        s = self.q_axis.shape[0]
        idx = np.clip(np.rint(q * (s - 1)).astype(int), 0, s - 1)
        value = self.value_table[idx[0], idx[1]]
        if not np.isfinite(value):
            raise ValidationError(f"oracle infeasible at state {q!r}")
        return float(value)


def oracle_optimal_value(
    env,
    horizon: int,
    constraint_level: float,
    *,
    state_points: int = 33,
    threshold_points: int = 65,
    levels_per_unit: int = 16,
    start_state: PopulationState | None = None,
) -> OracleSolution:
    """Constrained optimum over the discretized mean-field system.

    Maximizes total reward over `horizon` steps subject to total utility
    >= ``constraint_level``, by dynamic programming over (state cell,
    remaining utility budget) with the budget quantized to
    1/levels_per_unit units. Per-step utility contributions round down and
    the required budget rounds up, so claimed feasibility never
    overstates the true constraint slack at grid states. ``env`` must
    expose ``n_groups`` and ``batch_metrics(q_matrix, action)``.
    """
    if env.n_groups != 2:
        raise ConfigError("the oracle supports exactly 2 groups")
    if not 2 <= state_points <= 64:
        raise ValidationError(f"state_points must lie in [2, 64], got {state_points}")
    if threshold_points < 2:
        raise ValidationError("threshold_points must be >= 2")
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")

    q_axis = np.linspace(0.0, 1.0, state_points)
    if start_state is None:
        start_state = PopulationState((0.5, 0.5))
    if constraint_level > horizon:
        empty = np.full((state_points, state_points), -np.inf)
        return OracleSolution(
            feasible=False,
            value=None,
            threshold_sequence=None,
            report=(
                f"constraint level {constraint_level} exceeds the horizon {horizon}; "
                "per-step utility is at most 1"
            ),
            q_axis=q_axis,
            value_table=empty,
            constraint_level=constraint_level,
            horizon=horizon,
        )

    levels = int(levels_per_unit)
    budget = int(math.ceil(constraint_level * levels - 1e-9))
    grid_a, grid_b = np.meshgrid(q_axis, q_axis, indexing="ij")
    cells = np.column_stack([grid_a.ravel(), grid_b.ravel()])
    n_cells = cells.shape[0]

    t_axis = np.linspace(0.0, 1.0, threshold_points)
    actions = np.column_stack(
        [np.repeat(t_axis, threshold_points), np.tile(t_axis, threshold_points)]
    )

    # Per action: reward, quantized utility levels, successor cell index.
    n_actions = actions.shape[0]
    rewards = np.empty((n_actions, n_cells))
    glevels = np.empty((n_actions, n_cells), dtype=np.int64)
    successors = np.empty((n_actions, n_cells), dtype=np.int64)
    for a_idx in range(n_actions):
        step_loss, step_disp, next_q = env.batch_metrics(cells, actions[a_idx])
        rewards[a_idx] = 1.0 - step_loss
        glevels[a_idx] = np.floor((1.0 - step_disp) * levels + 1e-9).astype(np.int64)
        nearest = np.clip(np.rint(next_q * (state_points - 1)).astype(np.int64), 0, state_points - 1)
        successors[a_idx] = nearest[:, 0] * state_points + nearest[:, 1]

    n_budget = budget + 1
    value = np.full((n_cells, n_budget), -np.inf)
    value[:, 0] = 0.0  # no remaining requirement at the terminal layer
    best_action = np.zeros((horizon, n_cells, n_budget), dtype=np.int32)
    budget_row = np.arange(n_budget)[None, :]

    for h in range(horizon, 0, -1):
        layer = np.full((n_cells, n_budget), -np.inf)
        argmax = np.zeros((n_cells, n_budget), dtype=np.int32)
        for a_idx in range(n_actions):
            remaining = np.clip(budget_row - glevels[a_idx][:, None], 0, budget)
            cand = rewards[a_idx][:, None] + value[successors[a_idx][:, None], remaining]
            better = cand > layer
            layer[better] = cand[better]
            argmax[better] = a_idx
        value = layer
        best_action[h - 1] = argmax

    start_idx = (
        int(np.clip(round(start_state.qualification_rates[0] * (state_points - 1)), 0, state_points - 1))
        * state_points
        + int(np.clip(round(start_state.qualification_rates[1] * (state_points - 1)), 0, state_points - 1))
    )
    table = value[:, budget].reshape(state_points, state_points)
    start_value = value[start_idx, budget]
    if not np.isfinite(start_value):
        return OracleSolution(
            feasible=False,
            value=None,
            threshold_sequence=None,
            report=(
                f"no policy on the {state_points}x{state_points} state grid with "
                f"{threshold_points} thresholds per axis satisfies total utility >= "
                f"{constraint_level} (budget quantum 1/{levels})"
            ),
            q_axis=q_axis,
            value_table=table,
            constraint_level=constraint_level,
            horizon=horizon,
        )

    # Extract the optimizing open-loop threshold sequence from the start.
    sequence = np.empty((horizon, 2))
    cell, b = start_idx, budget
    for h in range(1, horizon + 1):
        a_idx = int(best_action[h - 1][cell, b])
        sequence[h - 1] = actions[a_idx]
        b = int(np.clip(b - glevels[a_idx, cell], 0, budget))
        cell = int(successors[a_idx, cell])

    return OracleSolution(
        feasible=True,
        value=float(start_value),
        threshold_sequence=sequence,
        report="feasible",
        q_axis=q_axis,
        value_table=table,
        constraint_level=constraint_level,
        horizon=horizon,
    )
