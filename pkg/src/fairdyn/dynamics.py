"""Replicator-dynamics transition kernel over qualification rates.

Each group's qualification rate moves under discrete-time replicator
dynamics: the share of qualified agents grows in proportion to the fitness
of being qualified relative to the group average, where fitness is the
expected classification-derived utility of holding that label under the
current thresholds. The kernel is the deterministic mean-field map;
stochasticity enters the system only through action sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from fairdyn.core import (
    PopulationState,
    ThresholdAction,
    ValidationError,
)


@dataclass(frozen=True)
class UtilityMatrix:
    """Group-independent utilities U[y][yhat] for labels y and predictions yhat.

    Field names spell out the (label, prediction) cell:

    * ``accept_qualified``   = U[+1][+1]
    * ``accept_unqualified`` = U[-1][+1]
    * ``reject_qualified``   = U[+1][-1]
    * ``reject_unqualified`` = U[-1][-1]

    The validated inequalities keep the induced dynamics non-degenerate:
    all entries positive (fitness must stay positive), acceptance strictly
    preferred to rejection for both labels, qualification costlier among
    the accepted, and qualification preferred among the rejected (so
    neither label is a dominant strategy).
    """

    accept_qualified: float = 4.0
    accept_unqualified: float = 5.0
    reject_qualified: float = 2.0
    reject_unqualified: float = 1.0

    def __post_init__(self) -> None:
        entries = {
            "accept_qualified": self.accept_qualified,
            "accept_unqualified": self.accept_unqualified,
            "reject_qualified": self.reject_qualified,
            "reject_unqualified": self.reject_unqualified,
        }
        for name, value in entries.items():
            if not np.isfinite(value) or value <= 0.0:
                raise ValidationError(f"utility {name} must be finite and > 0, got {value!r}")
        if not self.accept_qualified > self.reject_qualified:
            raise ValidationError("qualified agents must prefer acceptance over rejection")
        if not self.accept_unqualified > self.reject_unqualified:
            raise ValidationError("unqualified agents must prefer acceptance over rejection")
        if not self.accept_unqualified > self.accept_qualified:
            raise ValidationError(
                "qualification must be costly among accepted agents "
                "(accept_unqualified > accept_qualified)"
            )
        if not self.reject_qualified > self.reject_unqualified:
            raise ValidationError(
                "qualification must pay among rejected agents "
                "(reject_qualified > reject_unqualified)"
            )

    def to_json(self) -> dict:
        return {
            "accept_qualified": self.accept_qualified,
            "accept_unqualified": self.accept_unqualified,
            "reject_qualified": self.reject_qualified,
            "reject_unqualified": self.reject_unqualified,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "UtilityMatrix":
        return cls(
            float(payload["accept_qualified"]),
            float(payload["accept_unqualified"]),
            float(payload["reject_qualified"]),
            float(payload["reject_unqualified"]),
        )


DEFAULT_UTILITY = UtilityMatrix()


@dataclass(frozen=True)
class FitnessPair:
    """Per-group fitness of the two labels; strictly positive by construction."""

    w_plus: float
    w_minus: float

    def __post_init__(self) -> None:
        if not (self.w_plus > 0.0 and self.w_minus > 0.0):
            raise ValidationError(
                f"fitness values must be positive, got ({self.w_plus!r}, {self.w_minus!r})"
            )


class FeatureModel(Protocol):
    """What the transition kernel needs from a feature model."""

    model_ref: str

    def conditional_accept_rates(
        self, state: PopulationState, action: ThresholdAction
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-group (Pr(accept | qualified), Pr(accept | unqualified))."""
        ...


def _validate_conditional(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValidationError(
            f"{name} must be probabilities in [0, 1] (conditional rows over "
            f"predictions must sum to 1), got {p!r}"
        )
    return p


def fitness(
    accept_given_qualified: np.ndarray | float,
    accept_given_unqualified: np.ndarray | float,
    utility: UtilityMatrix,
) -> tuple[np.ndarray, np.ndarray]:
    """Expected utility of each label given group-conditional acceptance rates.

    W_plus = U[+1][+1]*Pr(accept|qualified) + U[+1][-1]*Pr(reject|qualified)
    and symmetrically for W_minus. Inputs may be scalars or per-group
    arrays; the rejection probability is the complement, so a value outside
    [0, 1] means the conditional row is not normalized and raises.
    """
    p_q = _validate_conditional(np.atleast_1d(accept_given_qualified), "accept_given_qualified")
    p_u = _validate_conditional(np.atleast_1d(accept_given_unqualified), "accept_given_unqualified")
    w_plus = utility.accept_qualified * p_q + utility.reject_qualified * (1.0 - p_q)
    w_minus = utility.accept_unqualified * p_u + utility.reject_unqualified * (1.0 - p_u)
    return w_plus, w_minus


def fitness_pair(
    accept_given_qualified: float,
    accept_given_unqualified: float,
    utility: UtilityMatrix,
) -> FitnessPair:
    """Scalar convenience wrapper around :func:`fitness` for one group."""
    w_plus, w_minus = fitness(accept_given_qualified, accept_given_unqualified, utility)
    return FitnessPair(float(w_plus[0]), float(w_minus[0]))


def replicator_step(
    q: np.ndarray | float, w_plus: np.ndarray | float, w_minus: np.ndarray | float
) -> np.ndarray:
    """One discrete replicator update q -> q*W_plus / (q*W_plus + (1-q)*W_minus).

    Maps [0, 1] into [0, 1] with fixed points at 0 and 1; q moves toward the
    label with the higher fitness.
    """
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    if np.any(q < 0.0) or np.any(q > 1.0):
        raise ValidationError(f"qualification rates must lie in [0, 1], got {q!r}")
    w_plus = np.atleast_1d(np.asarray(w_plus, dtype=np.float64))
    w_minus = np.atleast_1d(np.asarray(w_minus, dtype=np.float64))
    if np.any(w_plus <= 0.0) or np.any(w_minus <= 0.0):
        raise ValidationError("fitness values must be strictly positive")
    mean_fitness = q * w_plus + (1.0 - q) * w_minus
    next_q = q * w_plus / mean_fitness
    # Positivity of both fitnesses bounds the ratio in [0, 1]; clip only
    # guards against representation-level overshoot.
    return np.clip(next_q, 0.0, 1.0)


def transition(
    state: PopulationState,
    action: ThresholdAction,
    utility: UtilityMatrix,
    feature_model: FeatureModel,
) -> PopulationState:
    """Deterministic mean-field transition of the population state.

    Queries the feature model for exact group-conditional acceptance rates
    under ``action``, converts them to label fitnesses, and applies one
    replicator step per group. Group fractions are carried by the
    surrounding GroupSpec and are conserved by construction.
    """
    if state.group_count != action.group_count:
        raise ValidationError(
            f"state has {state.group_count} groups, action has {action.group_count}"
        )
    p_q, p_u = feature_model.conditional_accept_rates(state, action)
    w_plus, w_minus = fitness(p_q, p_u, utility)
    next_q = replicator_step(state.as_array(), w_plus, w_minus)
    return PopulationState(tuple(next_q.tolist()), state.feature_model_ref)
