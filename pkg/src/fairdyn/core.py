"""Shared value types, validation, RNG streams, and JSON round-tripping.

Everything downstream (dynamics, metrics, agents, the wire protocol) builds
on the small frozen dataclasses defined here. Serialized forms carry a
``fairdyn_schema`` version field so persisted artifacts and protocol peers
can detect incompatible producers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

# Tolerance for "sums to one" checks on probability vectors.
_SUM_TOL = 1e-12


class FairdynError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(FairdynError, ValueError):
    """A value violates a documented invariant."""


class DimensionError(ValidationError):
    """A vector has the wrong length for the configured group count."""


class ConfigError(ValidationError):
    """A configuration mapping is malformed or internally inconsistent."""


class ResourceError(FairdynError):
    """A requested construction would exceed a hard resource ceiling."""


def _as_float_tuple(values: Iterable[float], name: str) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} must be a sequence of numbers") from exc
    for v in out:
        if not math.isfinite(v):
            raise ValidationError(f"{name} contains a non-finite value: {v!r}")
    return out


def _check_unit_interval(values: Sequence[float], name: str) -> None:
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name} entries must lie in [0, 1], got {v!r}")


def _require_schema(payload: dict, expected_kind: str) -> None:
    version = payload.get("fairdyn_schema")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported fairdyn_schema {version!r} (expected {SCHEMA_VERSION})"
        )
    kind = payload.get("kind")
    if kind != expected_kind:
        raise ValidationError(f"expected kind {expected_kind!r}, got {kind!r}")


@dataclass(frozen=True)
class GroupSpec:
    """Static description of the population's demographic groups.

    Attributes:
        group_count: number of groups, at least 2.
        group_fractions: population share of each group; each in (0, 1) and
            summing to 1 within 1e-12.
    """

    group_count: int
    group_fractions: tuple[float, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.group_count, int) or self.group_count < 2:
            raise ValidationError(f"group_count must be an int >= 2, got {self.group_count!r}")
        fractions = _as_float_tuple(self.group_fractions, "group_fractions")
        object.__setattr__(self, "group_fractions", fractions)
        if len(fractions) != self.group_count:
            raise DimensionError(
                f"group_fractions has length {len(fractions)}, expected {self.group_count}"
            )
        if any(not 0.0 < f < 1.0 for f in fractions):
            raise ValidationError("group_fractions must lie strictly inside (0, 1)")
        total = math.fsum(fractions)
        if abs(total - 1.0) > _SUM_TOL:
            raise ValidationError(f"group_fractions sum to {total!r}, expected 1.0")

    @staticmethod
    def uniform(group_count: int) -> "GroupSpec":
        """Equal-share spec over ``group_count`` groups."""
        return GroupSpec(group_count, (1.0 / group_count,) * group_count)

    def to_json(self) -> dict:
        return {
            "fairdyn_schema": SCHEMA_VERSION,
            "kind": "group_spec",
            "group_count": self.group_count,
            "group_fractions": list(self.group_fractions),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "GroupSpec":
        _require_schema(payload, "group_spec")
        return cls(int(payload["group_count"]), tuple(payload["group_fractions"]))


@dataclass(frozen=True)
class PopulationState:
    """Per-group qualification rates plus a reference to the feature model.

    ``feature_model_ref`` is an opaque identifier (for the closed-form model
    the literal string ``"gaussian"``; for data-driven models a cache key)
    recorded so that trajectories stay interpretable after serialization.
    """

    qualification_rates: tuple[float, ...]
    feature_model_ref: str = "gaussian"

    def __post_init__(self) -> None:
        rates = _as_float_tuple(self.qualification_rates, "qualification_rates")
        object.__setattr__(self, "qualification_rates", rates)
        if len(rates) == 0:
            raise ValidationError("qualification_rates must be non-empty")
        _check_unit_interval(rates, "qualification_rates")
        if not isinstance(self.feature_model_ref, str):
            raise ValidationError("feature_model_ref must be a string")

    @property
    def group_count(self) -> int:
        return len(self.qualification_rates)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.qualification_rates, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "fairdyn_schema": SCHEMA_VERSION,
            "kind": "population_state",
            "qualification_rates": list(self.qualification_rates),
            "feature_model_ref": self.feature_model_ref,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "PopulationState":
        _require_schema(payload, "population_state")
        return cls(tuple(payload["qualification_rates"]), str(payload["feature_model_ref"]))


@dataclass(frozen=True)
class ThresholdAction:
    """One acceptance threshold per group, each in [0, 1].

    Thresholds live on the normalized scale regardless of the feature
    model; models map them onto their own score axis.
    """

    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        thresholds = _as_float_tuple(self.thresholds, "thresholds")
        object.__setattr__(self, "thresholds", thresholds)
        if len(thresholds) == 0:
            raise ValidationError("thresholds must be non-empty")
        _check_unit_interval(thresholds, "thresholds")

    @property
    def group_count(self) -> int:
        return len(self.thresholds)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.thresholds, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "fairdyn_schema": SCHEMA_VERSION,
            "kind": "threshold_action",
            "thresholds": list(self.thresholds),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ThresholdAction":
        _require_schema(payload, "threshold_action")
        return cls(tuple(payload["thresholds"]))


@dataclass(frozen=True)
class EpisodeConfig:
    """Horizon, episode budget, constraint level, and base seed for a run."""

    horizon: int
    episode_count: int
    constraint_level: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ValidationError(f"horizon must be a positive int, got {self.horizon!r}")
        if not isinstance(self.episode_count, int) or self.episode_count < 1:
            raise ValidationError(
                f"episode_count must be a positive int, got {self.episode_count!r}"
            )
        level = float(self.constraint_level)
        object.__setattr__(self, "constraint_level", level)
        if not 0.0 <= level <= self.horizon:
            raise ValidationError(
                f"constraint_level must lie in [0, horizon], got {level!r} with horizon {self.horizon}"
            )
        if not isinstance(self.seed, int):
            raise ValidationError("seed must be an int")

    def to_json(self) -> dict:
        return {
            "fairdyn_schema": SCHEMA_VERSION,
            "kind": "episode_config",
            "horizon": self.horizon,
            "episode_count": self.episode_count,
            "constraint_level": self.constraint_level,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EpisodeConfig":
        _require_schema(payload, "episode_config")
        return cls(
            int(payload["horizon"]),
            int(payload["episode_count"]),
            float(payload["constraint_level"]),
            int(payload["seed"]),
        )


@dataclass(frozen=True)
class StepRecord:
    """One transition with its per-step metrics.

    ``reward == 1 - loss`` and ``utility == 1 - disparity`` must hold
    bitwise; use :meth:`from_metrics` to construct records that satisfy the
    identities by definition.
    """

    state: PopulationState
    action: ThresholdAction
    reward: float
    utility: float
    loss: float
    disparity: float

    def __post_init__(self) -> None:
        if self.state.group_count != self.action.group_count:
            raise DimensionError(
                f"state has {self.state.group_count} groups but action has "
                f"{self.action.group_count}"
            )
        for name in ("reward", "utility", "loss", "disparity"):
            v = getattr(self, name)
            if not isinstance(v, float) or not math.isfinite(v):
                raise ValidationError(f"{name} must be a finite float, got {v!r}")
        _check_unit_interval((self.loss, self.disparity), "loss/disparity")
        if self.reward != 1.0 - self.loss:
            raise ValidationError("reward must equal 1 - loss exactly")
        if self.utility != 1.0 - self.disparity:
            raise ValidationError("utility must equal 1 - disparity exactly")

    @classmethod
    def from_metrics(
        cls,
        state: PopulationState,
        action: ThresholdAction,
        loss: float,
        disparity: float,
    ) -> "StepRecord":
        """Build a record from loss and disparity, deriving reward and utility."""
        loss = float(loss)
        disparity = float(disparity)
        return cls(
            state=state,
            action=action,
            reward=1.0 - loss,
            utility=1.0 - disparity,
            loss=loss,
            disparity=disparity,
        )

    def to_json(self) -> dict:
        return {
            "fairdyn_schema": SCHEMA_VERSION,
            "kind": "step_record",
            "state": self.state.to_json(),
            "action": self.action.to_json(),
            "reward": self.reward,
            "utility": self.utility,
            "loss": self.loss,
            "disparity": self.disparity,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "StepRecord":
        _require_schema(payload, "step_record")
        return cls(
            state=PopulationState.from_json(payload["state"]),
            action=ThresholdAction.from_json(payload["action"]),
            reward=float(payload["reward"]),
            utility=float(payload["utility"]),
            loss=float(payload["loss"]),
            disparity=float(payload["disparity"]),
        )


def clamp_action(raw: Sequence[float] | np.ndarray, group_spec: GroupSpec) -> ThresholdAction:
    """Clamp raw per-group values into [0, 1] and wrap them as an action.

    Raises DimensionError when the raw vector length does not match the
    group count; raw values may be any finite floats.
    """
    arr = np.asarray(raw, dtype=np.float64).reshape(-1)
    if arr.shape[0] != group_spec.group_count:
        raise DimensionError(
            f"raw action has length {arr.shape[0]}, expected {group_spec.group_count}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError("raw action contains non-finite values")
    return ThresholdAction(tuple(np.clip(arr, 0.0, 1.0).tolist()))


def seed_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Named, splittable random stream.

    Identical ``(seed, stream_label)`` pairs yield identical streams on any
    platform; distinct labels give statistically independent streams. Labels
    are hashed so callers can use free-form strings such as
    ``"episode/0017"``.
    """
    if not isinstance(seed, int):
        raise ValidationError("seed must be an int")
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in range(0, 32, 8)]
    seq = np.random.SeedSequence(entropy=[seed & 0xFFFFFFFFFFFFFFFF, *words])
    return np.random.Generator(np.random.Philox(seq))


def json_dumps(payload: Any) -> str:
    """Canonical JSON encoding: sorted keys, no whitespace padding, repr floats."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def stable_hash(payload: Any) -> str:
    """Hex SHA-256 of the canonical JSON encoding of ``payload``."""
    return hashlib.sha256(json_dumps(payload).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EpisodeRecord:
    """A completed episode: its steps plus the episode-level sums."""

    steps: tuple[StepRecord, ...]
    total_reward: float
    total_utility: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_steps(cls, steps: Sequence[StepRecord], meta: dict | None = None) -> "EpisodeRecord":
        total_r = math.fsum(s.reward for s in steps)
        total_g = math.fsum(s.utility for s in steps)
        return cls(tuple(steps), total_r, total_g, dict(meta or {}))

    def __len__(self) -> int:
        return len(self.steps)
