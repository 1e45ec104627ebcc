"""Voronoi discretization of the action cube [0,1]^n.

Loci sit on a regular axis-aligned lattice, so every Voronoi region is a
box with closed-form measure and uniform sampling is exact. Nearest-locus
assignment breaks ties toward the smaller index, matching the definition
the softmax policy relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fairdyn.core import ResourceError, ThresholdAction, ValidationError

DEFAULT_LOCUS_CEILING = 100_000

# The theoretical cover radius shrinks like 1/(K*H); this floor keeps the
# locus count finite at desk scale. The gap to the theory is logged by
# effective_epsilon.
EPSILON_FLOOR = 0.02


@dataclass(frozen=True)
class VoronoiActionSpace:
    """Loci, their box regions, and cover-radius bookkeeping.

    ``cover_radius`` is the achieved radius of the constructed lattice
    (at most the requested epsilon). ``axis_points`` holds the per-axis
    locus coordinates; loci are ordered row-major over axes, so index 0
    is the all-lowest corner.
    """

    dims: int
    axis_points: np.ndarray
    loci: np.ndarray
    cover_radius: float
    region_measures: np.ndarray
    requested_epsilon: float

    @property
    def locus_count(self) -> int:
        return int(self.loci.shape[0])

    def locus_action(self, index: int) -> ThresholdAction:
        return ThresholdAction(tuple(self.loci[index].tolist()))

    def region_bounds(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds (low, high) of region ``index``.

        Boundaries between neighboring cells sit at axis midpoints; the
        outermost cells extend to the cube faces. Shared faces belong to
        the lower-index cell through the tie-breaking rule, which has no
        effect on measures.
        """
        m = self.axis_points.shape[0]
        low = np.empty(self.dims)
        high = np.empty(self.dims)
        for axis, k in enumerate(self._unravel(index)):
            pts = self.axis_points
            low[axis] = 0.0 if k == 0 else 0.5 * (pts[k - 1] + pts[k])
            high[axis] = 1.0 if k == m - 1 else 0.5 * (pts[k] + pts[k + 1])
        return low, high

    def _unravel(self, index: int) -> tuple[int, ...]:
        m = self.axis_points.shape[0]
        return np.unravel_index(index, (m,) * self.dims)


def build_grid_cover(
    dims: int,
    epsilon: float,
    ceiling: int = DEFAULT_LOCUS_CEILING,
) -> VoronoiActionSpace:
    """Lattice cover of [0,1]^dims with cover radius at most ``epsilon``.

    Uses the smallest per-axis point count whose lattice spacing delta
    satisfies delta*sqrt(dims)/2 <= epsilon. A single central locus is used
    when epsilon already covers the half-diagonal. Raises ResourceError
    when the implied locus count exceeds ``ceiling``.
    """
    if not 1 <= dims <= 4:
        raise ValidationError(f"dims must lie in [1, 4], got {dims}")
    if not (np.isfinite(epsilon) and epsilon > 0.0):
        raise ValidationError(f"epsilon must be positive, got {epsilon!r}")
    half_diagonal = math.sqrt(dims) / 2.0
    if epsilon >= half_diagonal:
        per_axis = 1
    else:
        per_axis = math.ceil(half_diagonal / epsilon) + 1
    count = per_axis**dims
    if count > ceiling:
        min_epsilon = half_diagonal / (math.ceil(ceiling ** (1.0 / dims)) - 1)
        raise ResourceError(
            f"a cover at epsilon={epsilon} needs {count} loci (ceiling {ceiling}); "
            f"use epsilon >= {min_epsilon:.4g} or raise the ceiling"
        )

    if per_axis == 1:
        axis_points = np.array([0.5])
        radius = half_diagonal
    else:
        axis_points = np.linspace(0.0, 1.0, per_axis)
        spacing = 1.0 / (per_axis - 1)
        radius = spacing * math.sqrt(dims) / 2.0

    grids = np.meshgrid(*([axis_points] * dims), indexing="ij")
    loci = np.column_stack([g.ravel() for g in grids])

    if per_axis == 1:
        axis_measures = np.array([1.0])
    else:
        spacing = 1.0 / (per_axis - 1)
        axis_measures = np.full(per_axis, spacing)
        axis_measures[0] = axis_measures[-1] = spacing / 2.0
    measure_grids = np.meshgrid(*([axis_measures] * dims), indexing="ij")
    measures = np.ones(count)
    for g in measure_grids:
        measures = measures * g.ravel()

    return VoronoiActionSpace(
        dims=dims,
        axis_points=axis_points,
        loci=loci,
        cover_radius=radius,
        region_measures=measures,
        requested_epsilon=float(epsilon),
    )


def locus_of(space: VoronoiActionSpace, action: ThresholdAction | np.ndarray) -> int:
    """Index of the nearest locus, ties broken toward the smaller index."""
    a = action.as_array() if isinstance(action, ThresholdAction) else np.asarray(action)
    if a.shape != (space.dims,):
        raise ValidationError(f"action has shape {a.shape}, expected ({space.dims},)")
    deltas = space.loci - a[None, :]
    # argmin returns the first minimum, which is the smallest index.
    return int(np.argmin(np.einsum("ij,ij->i", deltas, deltas)))


def locus_of_batch(space: VoronoiActionSpace, actions: np.ndarray) -> np.ndarray:
    """Vectorized :func:`locus_of` over rows of ``actions``."""
    actions = np.asarray(actions, dtype=np.float64)
    diff = actions[:, None, :] - space.loci[None, :, :]
    dist = np.einsum("nij,nij->ni", diff, diff)
    return np.argmin(dist, axis=1)


def sample_uniform_in_region(
    space: VoronoiActionSpace, index: int, rng: np.random.Generator
) -> ThresholdAction:
    """Uniform draw from the box region of locus ``index``."""
    if not 0 <= index < space.locus_count:
        raise ValidationError(f"locus index {index} out of range [0, {space.locus_count})")
    low, high = space.region_bounds(index)
    draw = low + (high - low) * rng.random(space.dims)
    return ThresholdAction(tuple(draw.tolist()))


def theoretical_epsilon(
    rho: float, dual_ceiling: float, episodes: int, horizon: int, feature_dim: int
) -> float:
    """Cover radius prescribed by the regret analysis: 1/(2*rho*(1+V)*K*H*sqrt(d))."""
    if rho <= 0.0:
        raise ValidationError("rho must be positive")
    return 1.0 / (2.0 * rho * (1.0 + dual_ceiling) * episodes * horizon * math.sqrt(feature_dim))


def effective_epsilon(
    rho: float,
    dual_ceiling: float,
    episodes: int,
    horizon: int,
    feature_dim: int,
    floor: float = EPSILON_FLOOR,
    log=None,
) -> float:
    """Theoretical epsilon floored for tractability; the gap is reported."""
    theory = theoretical_epsilon(rho, dual_ceiling, episodes, horizon, feature_dim)
    chosen = max(theory, floor)
    if chosen > theory and log is not None:
        log(
            f"voronoi epsilon floored at {chosen:.4g} "
            f"(theory prescribes {theory:.3e} for K={episodes}, H={horizon})"
        )
    return chosen
