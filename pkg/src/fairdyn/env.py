"""Sequential decision environment over a classifier-facing population.

A state is the vector of per-group qualification rates, an action is the
vector of per-group normalized thresholds, and one step yields the
institution loss, the disparity, and a deterministic mean-field transition
of the rates. Episodes have a fixed finite horizon.
"""

from __future__ import annotations

import numpy as np

from fairdyn.core import (
    ConfigError,
    EpisodeRecord,
    GroupSpec,
    PopulationState,
    StepRecord,
    ThresholdAction,
)
from fairdyn.dynamics import DEFAULT_UTILITY, UtilityMatrix, transition
from fairdyn.features import outcome_rates, resolve_model
from fairdyn.metrics import DisparityKind, LossSpec, disparity, loss

INITIAL_RATE_LOW = 0.05
INITIAL_RATE_HIGH = 0.95


class FairnessEnv:
    """Environment facade bundling a feature model, dynamics, and metrics.

    Disparity is defined pairwise, so construction requires exactly two
    groups. ``model`` accepts either a model instance or the identifier
    string understood by :func:`fairdyn.features.resolve_model`.
    """

    def __init__(
        self,
        group_spec: GroupSpec,
        model="gaussian",
        utility: UtilityMatrix = DEFAULT_UTILITY,
        loss_spec: LossSpec | None = None,
        disparity_kind: DisparityKind | str = DisparityKind.DP,
        horizon: int = 100,
    ):
        if group_spec.group_count != 2:
            raise ConfigError(
                f"disparity metrics need exactly 2 groups, got {group_spec.group_count}"
            )
        if horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {horizon}")
        self.group_spec = group_spec
        self.model = resolve_model(model)
        self.utility = utility
        self.loss_spec = loss_spec if loss_spec is not None else LossSpec()
        self.disparity_kind = DisparityKind.parse(disparity_kind)
        self.horizon = int(horizon)

    @property
    def n_groups(self) -> int:
        return self.group_spec.group_count

    @property
    def model_ref(self) -> str:
        return self.model.model_ref

    def initial_state(self, rng: np.random.Generator) -> PopulationState:
        """Uniform qualification rates over [0.05, 0.95] per group."""
        rates = rng.uniform(INITIAL_RATE_LOW, INITIAL_RATE_HIGH, size=self.n_groups)
        return PopulationState(tuple(rates.tolist()), feature_model_ref=self.model_ref)

    def rates(self, state: PopulationState, action: ThresholdAction):
        return outcome_rates(self.model, self.group_spec, state, action)

    def step_metrics(
        self, state: PopulationState, action: ThresholdAction
    ) -> tuple[float, float, object]:
        """(loss, disparity, outcome rates) at one state-action pair."""
        rates = self.rates(state, action)
        return (
            loss(self.loss_spec, rates),
            disparity(self.disparity_kind, rates),
            rates,
        )

    def transition(self, state: PopulationState, action: ThresholdAction) -> PopulationState:
        return transition(state, action, self.utility, self.model)

    def step(
        self, state: PopulationState, action: ThresholdAction
    ) -> tuple[StepRecord, PopulationState]:
        step_loss, step_disp, _ = self.step_metrics(state, action)
        record = StepRecord.from_metrics(state, action, step_loss, step_disp)
        return record, self.transition(state, action)

    def batch_metrics(
        self, q_matrix: np.ndarray, action: ThresholdAction | np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized (loss, disparity, next rates) over (N, groups) states.

        Used by the planning oracle and the phase portrait; agrees with the
        scalar step path entrywise.
        """
        q = np.asarray(q_matrix, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != self.n_groups:
            raise ConfigError(f"q_matrix must be (N, {self.n_groups}), got {q.shape}")
        pi = np.asarray(self.group_spec.group_fractions)
        p_q, p_u = self.model.conditional_accept_rates_batch(q, action)

        tp = (pi * q * p_q).sum(axis=1)
        tn = (pi * (1.0 - q) * (1.0 - p_u)).sum(axis=1)
        ls = self.loss_spec
        if ls.legacy_sign:
            loss_vec = np.clip(1.0 - ls.alpha * tp + ls.beta * tn, 0.0, 1.0)
        else:
            loss_vec = 1.0 - ls.alpha * tp - ls.beta * tn

        kind = self.disparity_kind
        if kind is DisparityKind.DP:
            acc = q * p_q + (1.0 - q) * p_u
            disp_vec = 0.5 * (acc[:, 0] - acc[:, 1]) ** 2
        elif kind is DisparityKind.EOP:
            disp_vec = 0.5 * (p_q[:, 0] - p_q[:, 1]) ** 2
        elif kind is DisparityKind.EO:
            disp_vec = 0.5 * ((p_q[:, 0] - p_q[:, 1]) ** 2 + (p_u[:, 0] - p_u[:, 1]) ** 2)
        else:  # QR
            disp_vec = 0.5 * (q[:, 0] - q[:, 1]) ** 2

        u = self.utility
        w_plus = u.accept_qualified * p_q + u.reject_qualified * (1.0 - p_q)
        w_minus = u.accept_unqualified * p_u + u.reject_unqualified * (1.0 - p_u)
        mass_plus = q * w_plus
        next_q = mass_plus / (mass_plus + (1.0 - q) * w_minus)
        return loss_vec, disp_vec, np.clip(next_q, 0.0, 1.0)


class FixedThresholdAgent:
    """Plays one constant action; useful for tests and portraits."""

    def __init__(self, action: ThresholdAction):
        self.action = action

    def act(self, state, h: int, rng: np.random.Generator) -> ThresholdAction:
        return self.action


def run_episode(
    env: FairnessEnv,
    agent,
    rng: np.random.Generator,
    initial_state: PopulationState | None = None,
) -> EpisodeRecord:
    """Roll one full episode: exactly ``env.horizon`` step records.

    The agent contract is a single method ``act(state, h, rng)`` with h
    counting from 1; the episode ends only when the horizon is exhausted.
    """
    state = initial_state if initial_state is not None else env.initial_state(rng)
    steps: list[StepRecord] = []
    for h in range(1, env.horizon + 1):
        action = agent.act(state, h, rng)
        record, state = env.step(state, action)
        steps.append(record)
    return EpisodeRecord.from_steps(
        steps, meta={"model_ref": env.model_ref, "horizon": env.horizon}
    )
