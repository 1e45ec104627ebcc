"""Conditional feature laws Pr(X|Y,G) and classification outcome rates.

Two model families: a closed-form Gaussian score law (X ~ N(Y, 1),
group-independent) and an empirical score law derived from a labeled
dataset by reweighted logistic preprocessing, binned into per-(label,
group) histograms over a grid of target qualification rates and linearly
interpolated at query time.
"""

from __future__ import annotations

import csv
import json
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, ndtr

from fairdyn.core import (
    SCHEMA_VERSION,
    ConfigError,
    FairdynError,
    GroupSpec,
    PopulationState,
    ThresholdAction,
    ValidationError,
)


class IngestError(FairdynError):
    """A dataset file does not match its declared schema."""


class FitError(FairdynError):
    """Model fitting failed to converge."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


# ---------------------------------------------------------------------------
# Gaussian score model
# ---------------------------------------------------------------------------

# Raw score range covering roughly +/- 4 sigma around both class means
# (means at -1 and +1, unit variance). Actions in [0,1] map affinely onto it.
GAUSSIAN_RAW_LOW = -4.0
GAUSSIAN_RAW_HIGH = 6.0


@dataclass(frozen=True)
class GaussianScoreModel:
    """Score law X ~ N(Y, 1), independent of group.

    The posterior Pr(Y=1|X=x) is logistic in x for every qualification rate
    in (0, 1), so score thresholding is Bayes-consistent for this model.
    """

    model_ref: str = "gaussian"

    def raw_threshold(self, action: ThresholdAction | np.ndarray) -> np.ndarray:
        """Map normalized thresholds in [0,1] onto the raw score axis."""
        a = action.as_array() if isinstance(action, ThresholdAction) else np.asarray(action)
        return GAUSSIAN_RAW_LOW + (GAUSSIAN_RAW_HIGH - GAUSSIAN_RAW_LOW) * a

    def conditional_accept_rates(
        self, state: PopulationState, action: ThresholdAction
    ) -> tuple[np.ndarray, np.ndarray]:
        """Exact (Pr(accept|qualified), Pr(accept|unqualified)) per group."""
        t = self.raw_threshold(action)
        # Pr(X >= t | Y=y) = 1 - Phi(t - y) = Phi(y - t)
        return ndtr(1.0 - t), ndtr(-1.0 - t)

    def accept_rate_action_grad(
        self, state: PopulationState, action: ThresholdAction
    ) -> tuple[np.ndarray, np.ndarray]:
        """d/dA of the two conditional acceptance rates (closed form)."""
        t = self.raw_threshold(action)
        scale = GAUSSIAN_RAW_HIGH - GAUSSIAN_RAW_LOW
        pdf = lambda z: np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)  # noqa: E731
        return -scale * pdf(t - 1.0), -scale * pdf(t + 1.0)

    def conditional_accept_rates_batch(
        self, rates: np.ndarray, action: ThresholdAction | np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched rates over an (N, groups) qualification matrix.

        The Gaussian conditional rates do not depend on the qualification
        rate, so every row repeats the same per-group values.
        """
        rates = np.asarray(rates, dtype=np.float64)
        t = self.raw_threshold(action)
        p_q = np.broadcast_to(ndtr(1.0 - t), rates.shape)
        p_u = np.broadcast_to(ndtr(-1.0 - t), rates.shape)
        return p_q, p_u

    def posterior(self, x: np.ndarray, q: float, group: int = 0) -> np.ndarray:
        """Pr(Y=1 | X=x) on the raw score axis at qualification rate q."""
        x = np.asarray(x, dtype=np.float64)
        # Likelihood ratio N(x;1,1)/N(x;-1,1) = exp(2x); posterior is logistic.
        return expit(2.0 * x + math.log(q) - math.log1p(-q))

    def sample_scores(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Raw scores for an array of labels in {-1, +1}."""
        return labels.astype(np.float64) + rng.standard_normal(labels.shape[0])


# ---------------------------------------------------------------------------
# Dataset ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IngestSchema:
    """Column roles for CSV ingestion.

    ``label_positive`` holds the raw label strings mapped to Y=+1; all other
    label values map to Y=-1. ``group_values`` fixes group index order; when
    empty, distinct values are used in sorted order.
    """

    numeric_columns: tuple[str, ...]
    categorical_columns: tuple[str, ...]
    label_column: str
    label_positive: tuple[str, ...]
    group_column: str
    group_values: tuple[str, ...] = ()


# The Adult census schema: group = sex, label = income thresholded at 50K.
ADULT_SCHEMA = IngestSchema(
    numeric_columns=("age", "education_num", "hours_per_week", "capital_gain"),
    categorical_columns=("workclass", "marital_status", "occupation"),
    label_column="income",
    label_positive=(">50K",),
    group_column="sex",
    group_values=("Female", "Male"),
)


@dataclass(frozen=True)
class LabeledDataset:
    """Cleaned design matrix with labels in {-1,+1} and integer group ids."""

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    feature_names: tuple[str, ...]
    group_names: tuple[str, ...]
    source: str = ""

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features and labels must align row-wise")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValidationError("labels must be -1 or +1")
        for g in range(len(self.group_names)):
            for y in (-1, 1):
                if not np.any((self.groups == g) & (self.labels == y)):
                    raise ValidationError(
                        f"dataset has no rows with label {y} in group "
                        f"{self.group_names[g]!r}"
                    )

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def cell_counts(self) -> dict[tuple[str, int], int]:
        """Row counts per (group name, label) cell."""
        out = {}
        for g, name in enumerate(self.group_names):
            for y in (-1, 1):
                out[(name, y)] = int(np.sum((self.groups == g) & (self.labels == y)))
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.groups, dtype="<i8").tobytes())
        return h.hexdigest()


def ingest_dataset(path: str | Path, schema: IngestSchema) -> LabeledDataset:
    """Load a CSV (header row required) into a LabeledDataset.

    Numeric columns are standardized to zero mean and unit variance;
    categorical columns are one-hot encoded over their observed values.
    Missing columns or empty cells raise IngestError naming the offender.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: empty file, header row required")
        header = [name.strip() for name in reader.fieldnames]
        needed = (
            set(schema.numeric_columns)
            | set(schema.categorical_columns)
            | {schema.label_column, schema.group_column}
        )
        missing = sorted(needed - set(header))
        if missing:
            raise IngestError(f"{path}: missing columns {missing}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            clean = {}
            for col in needed:
                value = (row.get(col) or "").strip()
                if value == "":
                    raise IngestError(f"{path}: empty cell at row {line_no}, column {col!r}")
                clean[col] = value
            rows.append((line_no, clean))
    if not rows:
        raise IngestError(f"{path}: no data rows")

    group_values = schema.group_values or tuple(
        sorted({clean[schema.group_column] for _, clean in rows})
    )
    group_index = {v: i for i, v in enumerate(group_values)}

    labels = np.empty(len(rows), dtype=np.int64)
    groups = np.empty(len(rows), dtype=np.int64)
    numeric = np.empty((len(rows), len(schema.numeric_columns)), dtype=np.float64)
    categorical_values: dict[str, list[str]] = {c: [] for c in schema.categorical_columns}

    for i, (line_no, clean) in enumerate(rows):
        labels[i] = 1 if clean[schema.label_column] in schema.label_positive else -1
        raw_group = clean[schema.group_column]
        if raw_group not in group_index:
            raise IngestError(
                f"{path}: row {line_no} has group {raw_group!r}, expected one of {group_values}"
            )
        groups[i] = group_index[raw_group]
        for j, col in enumerate(schema.numeric_columns):
            try:
                numeric[i, j] = float(clean[col])
            except ValueError as exc:
                raise IngestError(
                    f"{path}: row {line_no}, column {col!r}: {clean[col]!r} is not numeric"
                ) from exc
        for col in schema.categorical_columns:
            categorical_values[col].append(clean[col])

    # Standardize numerics; constant columns become zeros rather than NaN.
    mean = numeric.mean(axis=0)
    std = numeric.std(axis=0)
    std[std == 0.0] = 1.0
    numeric = (numeric - mean) / std

    blocks = [numeric]
    names = list(schema.numeric_columns)
    for col in schema.categorical_columns:
        values = categorical_values[col]
        levels = sorted(set(values))
        onehot = np.zeros((len(rows), len(levels)), dtype=np.float64)
        level_index = {v: k for k, v in enumerate(levels)}
        for i, v in enumerate(values):
            onehot[i, level_index[v]] = 1.0
        blocks.append(onehot)
        names.extend(f"{col}={v}" for v in levels)

    return LabeledDataset(
        features=np.hstack(blocks),
        labels=labels,
        groups=groups,
        feature_names=tuple(names),
        group_names=group_values,
        source=str(path),
    )


# ---------------------------------------------------------------------------
# Reweighted logistic preprocessing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs for the weighted logistic fit."""

    max_iter: int = 500
    grad_tol: float = 1e-5
    l2: float = 1e-6  # keeps the minimizer bounded on separable data


@dataclass(frozen=True)
class LogisticScorer:
    """Fitted scoring function: features -> Pr(Y=1) in (0, 1)."""

    coef: np.ndarray
    intercept: float
    feature_names: tuple[str, ...]

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[1] != self.coef.shape[0]:
            raise ValidationError(
                f"scorer expects {self.coef.shape[0]} features, got {features.shape[1]}"
            )
        return expit(features @ self.coef + self.intercept)


def _reweighting_weights(data: LabeledDataset, target_rates: np.ndarray) -> np.ndarray:
    """Importance weights steering each group's label mix toward target_rates."""
    weights = np.empty(data.n_rows, dtype=np.float64)
    for g in range(data.n_groups):
        in_group = data.groups == g
        base_rate = np.mean(data.labels[in_group] == 1)
        q = target_rates[g]
        weights[in_group & (data.labels == 1)] = q / base_rate
        weights[in_group & (data.labels == -1)] = (1.0 - q) / (1.0 - base_rate)
    return weights


def reweighted_logistic_fit(
    data: LabeledDataset,
    target_rates: Sequence[float],
    opt: OptimizerConfig = OptimizerConfig(),
) -> LogisticScorer:
    """Weighted logistic regression simulating the target qualification rates.

    Rows are importance-weighted so each group's effective positive rate
    equals its target, then the weighted logistic log-loss (the convex
    surrogate for the zero-one loss) is minimized with L-BFGS using the
    analytic gradient. Raises FitError with the final gradient norm when
    the optimizer stops without satisfying the gradient tolerance.
    """
    target = np.asarray(target_rates, dtype=np.float64)
    if target.shape != (data.n_groups,):
        raise ValidationError(
            f"target_rates must have one entry per group ({data.n_groups}), got {target.shape}"
        )
    if np.any(target <= 0.0) or np.any(target >= 1.0):
        raise ValidationError("target rates must lie strictly inside (0, 1)")

    weights = _reweighting_weights(data, target)
    weights = weights / weights.sum()
    x = data.features
    y = data.labels.astype(np.float64)
    dim = x.shape[1]

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        coef, intercept = params[:dim], params[dim]
        z = y * (x @ coef + intercept)
        # log(1 + exp(-z)) evaluated stably on both tails
        loss_terms = np.logaddexp(0.0, -z)
        value = float(weights @ loss_terms) + 0.5 * opt.l2 * float(coef @ coef)
        sigma = expit(-z)  # d/dz log(1+exp(-z)) = -sigma(-z)
        common = weights * sigma * y
        grad = np.empty(dim + 1)
        grad[:dim] = -(x.T @ common) + opt.l2 * coef
        grad[dim] = -common.sum()
        return value, grad

    result = minimize(
        objective,
        x0=np.zeros(dim + 1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": opt.max_iter, "gtol": opt.grad_tol, "ftol": 1e-14},
    )
    grad_norm = float(np.max(np.abs(objective(result.x)[1])))
    if grad_norm > opt.grad_tol * 10.0:
        raise FitError("logistic fit did not converge", grad_norm)
    return LogisticScorer(
        coef=result.x[:dim].copy(),
        intercept=float(result.x[dim]),
        feature_names=data.feature_names,
    )


# ---------------------------------------------------------------------------
# Empirical score model
# ---------------------------------------------------------------------------

MIN_BINS = 16
_HIST_SUM_TOL = 1e-9


@dataclass(frozen=True)
class EmpiricalScoreModel:
    """Score histograms per (group, label) across a qualification-rate grid.

    ``histograms[g, y01, i]`` is the probability vector of score bins for
    group g, label index y01 (0 for Y=-1, 1 for Y=+1), at q_grid[i]. At
    query time the histogram for an arbitrary rate is linearly interpolated
    between its neighboring grid points, separately per group. Scores and
    thresholds share the [0, 1] axis, so the raw threshold map is identity.
    """

    q_grid: np.ndarray
    histograms: np.ndarray
    group_names: tuple[str, ...]
    dataset_hash: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        q = np.asarray(self.q_grid, dtype=np.float64)
        object.__setattr__(self, "q_grid", q)
        hist = np.asarray(self.histograms, dtype=np.float64)
        object.__setattr__(self, "histograms", hist)
        if q.ndim != 1 or np.any(np.diff(q) <= 0):
            raise ValidationError("q_grid must be strictly increasing")
        if np.any(q <= 0.0) or np.any(q >= 1.0):
            raise ValidationError("q_grid points must lie strictly inside (0, 1)")
        if hist.ndim != 4 or hist.shape[:3] != (len(self.group_names), 2, q.shape[0]):
            raise ValidationError(
                "histograms must have shape (groups, 2 labels, grid, bins), got "
                f"{hist.shape}"
            )
        if hist.shape[3] < MIN_BINS:
            raise ValidationError(f"bin count must be >= {MIN_BINS}, got {hist.shape[3]}")
        sums = hist.sum(axis=3)
        if np.any(np.abs(sums - 1.0) > _HIST_SUM_TOL) or np.any(hist < 0.0):
            raise ValidationError("each histogram must be a probability vector")

    @property
    def bins(self) -> int:
        return int(self.histograms.shape[3])

    @property
    def model_ref(self) -> str:
        return f"empirical:{self.dataset_hash[:12]}"

    def raw_threshold(self, action: ThresholdAction | np.ndarray) -> np.ndarray:
        a = action.as_array() if isinstance(action, ThresholdAction) else np.asarray(action)
        return np.asarray(a, dtype=np.float64)

    def interpolated_histograms(self, rates: np.ndarray) -> np.ndarray:
        """Per-group (2, bins) histograms at the queried rates.

        Rates outside the grid clamp to the nearest endpoint; interior
        rates blend the two neighboring grid histograms linearly, which
        preserves normalization by convexity.
        """
        rates = np.asarray(rates, dtype=np.float64)
        out = np.empty((rates.shape[0], 2, self.bins))
        grid = self.q_grid
        for g, q in enumerate(rates):
            if q <= grid[0]:
                out[g] = self.histograms[g, :, 0]
            elif q >= grid[-1]:
                out[g] = self.histograms[g, :, -1]
            else:
                j = int(np.searchsorted(grid, q) - 1)
                w = (q - grid[j]) / (grid[j + 1] - grid[j])
                out[g] = (1.0 - w) * self.histograms[g, :, j] + w * self.histograms[g, :, j + 1]
        return out

    def conditional_accept_rates(
        self, state: PopulationState, action: ThresholdAction
    ) -> tuple[np.ndarray, np.ndarray]:
        """Pr(score >= threshold | label, group) with in-bin linear CDF."""
        if state.group_count != len(self.group_names):
            raise ValidationError(
                f"state has {state.group_count} groups, model has {len(self.group_names)}"
            )
        hists = self.interpolated_histograms(state.as_array())
        thresholds = self.raw_threshold(action)
        n = state.group_count
        accept_q = np.empty(n)
        accept_u = np.empty(n)
        for g in range(n):
            accept_u[g] = _mass_above(hists[g, 0], thresholds[g])
            accept_q[g] = _mass_above(hists[g, 1], thresholds[g])
        return accept_q, accept_u

    def conditional_accept_rates_batch(
        self, rates: np.ndarray, action: ThresholdAction | np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched rates over an (N, groups) qualification matrix."""
        rates = np.asarray(rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[1] != len(self.group_names):
            raise ValidationError(
                f"rates must be (N, {len(self.group_names)}), got {rates.shape}"
            )
        thresholds = self.raw_threshold(action)
        grid = self.q_grid
        n_rows, n_groups = rates.shape
        accept_q = np.empty((n_rows, n_groups))
        accept_u = np.empty((n_rows, n_groups))
        for g in range(n_groups):
            r = np.clip(rates[:, g], grid[0], grid[-1])
            hi = np.clip(np.searchsorted(grid, r), 1, grid.shape[0] - 1)
            lo = hi - 1
            w = (r - grid[lo]) / (grid[hi] - grid[lo])
            blend = (
                self.histograms[g][:, lo, :] * (1.0 - w)[None, :, None]
                + self.histograms[g][:, hi, :] * w[None, :, None]
            )
            accept_u[:, g] = _mass_above_rows(blend[0], float(thresholds[g]))
            accept_q[:, g] = _mass_above_rows(blend[1], float(thresholds[g]))
        return accept_q, accept_u

    def posterior(self, x: np.ndarray, q: float, group: int = 0) -> np.ndarray:
        """Pr(Y=1 | score=x, G=group) under the interpolated histograms."""
        hists = self.interpolated_histograms(np.full(len(self.group_names), q))
        x = np.asarray(x, dtype=np.float64)
        idx = np.clip((x * self.bins).astype(int), 0, self.bins - 1)
        f_pos = hists[group, 1, idx] * q
        f_neg = hists[group, 0, idx] * (1.0 - q)
        denom = f_pos + f_neg
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.where(denom > 0, f_pos / denom, 0.5)
        return post

    def to_json(self) -> dict:
        return {
            "fairdyn_schema": SCHEMA_VERSION,
            "kind": "empirical_score_model",
            "q_grid": self.q_grid.tolist(),
            "histograms": self.histograms.tolist(),
            "group_names": list(self.group_names),
            "dataset_hash": self.dataset_hash,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EmpiricalScoreModel":
        if payload.get("fairdyn_schema") != SCHEMA_VERSION:
            raise ValidationError("unsupported fairdyn_schema in model cache")
        return cls(
            q_grid=np.asarray(payload["q_grid"], dtype=np.float64),
            histograms=np.asarray(payload["histograms"], dtype=np.float64),
            group_names=tuple(payload["group_names"]),
            dataset_hash=str(payload["dataset_hash"]),
            provenance=dict(payload.get("provenance", {})),
        )


def _mass_above(hist: np.ndarray, threshold: float) -> float:
    """P(score >= threshold) for a binned density with uniform in-bin mass."""
    bins = hist.shape[0]
    pos = np.clip(threshold, 0.0, 1.0) * bins
    j = min(int(pos), bins - 1)
    frac = pos - j
    below = float(hist[:j].sum()) + float(hist[j]) * frac
    return min(max(1.0 - below, 0.0), 1.0)


def _mass_above_rows(hists: np.ndarray, threshold: float) -> np.ndarray:
    """Row-wise _mass_above for an (N, bins) stack of histograms."""
    bins = hists.shape[1]
    pos = float(np.clip(threshold, 0.0, 1.0)) * bins
    j = min(int(pos), bins - 1)
    frac = pos - j
    below = hists[:, :j].sum(axis=1) + hists[:, j] * frac
    return np.clip(1.0 - below, 0.0, 1.0)


DEFAULT_Q_GRID = tuple(np.round(np.linspace(0.05, 0.95, 17), 10).tolist())


def build_empirical_model(
    data: LabeledDataset,
    q_grid: Sequence[float] = DEFAULT_Q_GRID,
    bins: int = 32,
    opt: OptimizerConfig = OptimizerConfig(),
    cache_path: str | Path | None = None,
) -> EmpiricalScoreModel:
    """Fit the score-histogram family over a qualification-rate grid.

    One reweighted logistic fit per grid point (the same target rate is
    used for every group; per-group rates are recovered at query time via
    interpolation). When ``cache_path`` exists and its recorded dataset
    hash matches, the cached model is returned without refitting.
    """
    if bins < MIN_BINS:
        raise ValidationError(f"bins must be >= {MIN_BINS}, got {bins}")
    data_hash = data.content_hash()
    if cache_path is not None:
        cache_path = Path(cache_path)
        if cache_path.exists():
            with open(cache_path, encoding="utf-8") as fh:
                payload = json.load(fh)
            if payload.get("dataset_hash") == data_hash:
                return EmpiricalScoreModel.from_json(payload)

    grid = np.asarray(sorted(q_grid), dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    histograms = np.empty((data.n_groups, 2, grid.shape[0], bins))
    for i, q in enumerate(grid):
        try:
            scorer = reweighted_logistic_fit(data, np.full(data.n_groups, q), opt)
        except FitError as exc:
            raise FitError(f"grid point q={q}: {exc}", exc.grad_norm) from exc
        scores = scorer.score(data.features)
        for g in range(data.n_groups):
            for y01, y in enumerate((-1, 1)):
                cell = scores[(data.groups == g) & (data.labels == y)]
                counts, _ = np.histogram(cell, bins=edges)
                histograms[g, y01, i] = counts / counts.sum()

    model = EmpiricalScoreModel(
        q_grid=grid,
        histograms=histograms,
        group_names=data.group_names,
        dataset_hash=data_hash,
        provenance={"source": data.source, "rows": data.n_rows, "bins": bins},
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        with open(cache_path, "w", encoding="utf-8") as fh:
            json.dump(model.to_json(), fh, sort_keys=True)
    return model


def monotonicity_violations(model, q: float, grid_points: int = 256, group: int = 0) -> int:
    """Count of adjacent score-grid pairs where Pr(Y=1|X) strictly decreases.

    A diagnostic for the monotone-posterior assumption: 0 for the Gaussian
    model by construction; possibly positive for empirical models, whose
    preprocessing only approximately satisfies it.
    """
    if isinstance(model, GaussianScoreModel):
        xs = np.linspace(GAUSSIAN_RAW_LOW, GAUSSIAN_RAW_HIGH, grid_points)
    else:
        xs = np.linspace(0.0, 1.0, grid_points)
    post = model.posterior(xs, q, group)
    diffs = np.diff(post)
    return int(np.sum(diffs < -1e-12))


# ---------------------------------------------------------------------------
# Outcome rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeRates:
    """Classification outcome rates at one (state, action) pair.

    Conditional arrays are per group; ``tp_g`` and friends are joint rates
    including the group weight (so they sum over groups to the scalar
    totals). ``acceptance_rate`` is Pr(accept | G=g).
    """

    accept_given_qualified: np.ndarray
    accept_given_unqualified: np.ndarray
    acceptance_rate: np.ndarray
    tp_g: np.ndarray
    fp_g: np.ndarray
    tn_g: np.ndarray
    fn_g: np.ndarray
    qualification_rates: np.ndarray
    group_fractions: np.ndarray

    @property
    def tp(self) -> float:
        return float(self.tp_g.sum())

    @property
    def fp(self) -> float:
        return float(self.fp_g.sum())

    @property
    def tn(self) -> float:
        return float(self.tn_g.sum())

    @property
    def fn(self) -> float:
        return float(self.fn_g.sum())


def resolve_model(model):
    """Resolve a feature-model argument: instance or the id "gaussian"."""
    if isinstance(model, str):
        if model == "gaussian":
            return GaussianScoreModel()
        raise ConfigError(f"unknown feature model id {model!r}")
    if hasattr(model, "conditional_accept_rates"):
        return model
    raise ConfigError(f"object {model!r} does not implement the feature-model interface")


def outcome_rates(
    model,
    group_spec: GroupSpec,
    state: PopulationState,
    action: ThresholdAction,
) -> OutcomeRates:
    """Joint and conditional outcome rates for one (state, action) pair."""
    model = resolve_model(model)
    if state.group_count != group_spec.group_count:
        raise ValidationError(
            f"state has {state.group_count} groups, spec has {group_spec.group_count}"
        )
    if action.group_count != group_spec.group_count:
        raise ValidationError(
            f"action has {action.group_count} groups, spec has {group_spec.group_count}"
        )
    p_q, p_u = model.conditional_accept_rates(state, action)
    q = state.as_array()
    pi = np.asarray(group_spec.group_fractions, dtype=np.float64)
    tp_g = pi * q * p_q
    fn_g = pi * q * (1.0 - p_q)
    fp_g = pi * (1.0 - q) * p_u
    tn_g = pi * (1.0 - q) * (1.0 - p_u)
    acceptance = q * p_q + (1.0 - q) * p_u
    return OutcomeRates(
        accept_given_qualified=p_q,
        accept_given_unqualified=p_u,
        acceptance_rate=acceptance,
        tp_g=tp_g,
        fp_g=fp_g,
        tn_g=tn_g,
        fn_g=fn_g,
        qualification_rates=q,
        group_fractions=pi,
    )
