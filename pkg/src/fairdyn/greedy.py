"""Myopic baseline: per-step minimization of (1-lam)*loss + lam*disparity.

Each call runs a short projected gradient descent over the threshold box
with backtracking halving, restarted from a few random points, and keeps
the best endpoint. Gradients come in closed form when the feature model
exposes an action derivative for its acceptance rates; otherwise central
finite differences on the scalar objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from fairdyn.core import ConfigError, ThresholdAction
from fairdyn.metrics import DisparityKind, disparity, loss


@dataclass(frozen=True)
class GreedyConfig:
    """lam trades loss against disparity; the rest tune the descent."""

    lam: float = 0.5
    step_size: float = 0.05
    descent_steps: int = 200
    restarts: int = 3
    fd_step: float = 1e-4
    min_step: float = 1e-7

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.step_size <= 0 or self.descent_steps < 1 or self.restarts < 1:
            raise ConfigError("step_size, descent_steps, restarts must be positive")
        if self.fd_step <= 0 or self.min_step <= 0:
            raise ConfigError("fd_step and min_step must be positive")


def greedy_objective(env, state, action: ThresholdAction, lam: float) -> float:
    """Scalar objective (1-lam)*loss + lam*disparity at one (state, action)."""
    step_loss, step_disp, _ = env.step_metrics(state, action)
    return (1.0 - lam) * step_loss + lam * step_disp


def _objective_array(env, state, lam: float) -> Callable[[np.ndarray], float]:
    def f(x: np.ndarray) -> float:
        return greedy_objective(env, state, ThresholdAction(tuple(x.tolist())), lam)

    return f


def _fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central differences, clipping probe points into the unit box."""
    grad = np.zeros_like(x)
    for j in range(x.shape[0]):
        up = x.copy()
        dn = x.copy()
        up[j] = min(x[j] + h, 1.0)
        dn[j] = max(x[j] - h, 0.0)
        span = up[j] - dn[j]
        if span <= 0:
            grad[j] = 0.0
        else:
            grad[j] = (f(up) - f(dn)) / span
    return grad


def analytic_gradient(env, state, x: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form objective gradient via the model's acceptance-rate
    derivatives; valid for the standard-sign loss only."""
    model = env.model
    action = ThresholdAction(tuple(x.tolist()))
    q = state.as_array()
    pi = np.asarray(env.group_spec.group_fractions)
    p_q, p_u = model.conditional_accept_rates(state, action)
    dp_q, dp_u = model.accept_rate_action_grad(state, action)

    ls = env.loss_spec
    # loss = 1 - alpha*tp - beta*tn with tp = sum pi*q*p_q, tn = sum pi*(1-q)*(1-p_u)
    dloss = -ls.alpha * pi * q * dp_q + ls.beta * pi * (1.0 - q) * dp_u

    kind = env.disparity_kind
    sign = np.array([1.0, -1.0])
    if kind is DisparityKind.DP:
        acc = q * p_q + (1.0 - q) * p_u
        dacc = q * dp_q + (1.0 - q) * dp_u
        ddisp = (acc[0] - acc[1]) * dacc * sign
    elif kind is DisparityKind.EOP:
        ddisp = (p_q[0] - p_q[1]) * dp_q * sign
    elif kind is DisparityKind.EO:
        ddisp = ((p_q[0] - p_q[1]) * dp_q + (p_u[0] - p_u[1]) * dp_u) * sign
    else:  # QR: disparity depends on the state only
        ddisp = np.zeros_like(x)
    return (1.0 - lam) * dloss + lam * ddisp


def descend(
    f: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    config: GreedyConfig,
) -> tuple[np.ndarray, float]:
    """Projected descent with backtracking: a step is halved until the
    objective does not increase, so the iterate value is non-increasing."""
    x = np.clip(np.asarray(x0, dtype=np.float64), 0.0, 1.0)
    fx = f(x)
    for _ in range(config.descent_steps):
        g = grad_fn(x)
        gnorm = float(np.linalg.norm(g))
        if gnorm < 1e-12:
            break
        step = config.step_size
        while step >= config.min_step:
            cand = np.clip(x - step * g, 0.0, 1.0)
            fc = f(cand)
            if fc <= fx:
                x, fx = cand, fc
                break
            step *= 0.5
        else:
            break
    return x, fx


def greedy_act(
    env, state, config: GreedyConfig, rng: np.random.Generator
) -> ThresholdAction:
    """Best endpoint over random restarts of the descent."""
    f = _objective_array(env, state, config.lam)
    use_analytic = (
        hasattr(env, "model")
        and hasattr(env.model, "accept_rate_action_grad")
        and not env.loss_spec.legacy_sign
    )
    if use_analytic:
        grad_fn = lambda x: analytic_gradient(env, state, x, config.lam)
    else:
        grad_fn = lambda x: _fd_gradient(f, x, config.fd_step)

    n = env.group_spec.group_count
    best_x: np.ndarray | None = None
    best_f = np.inf
    for _ in range(config.restarts):
        x0 = rng.uniform(0.0, 1.0, size=n)
        x, fx = descend(f, grad_fn, x0, config)
        if fx < best_f:
            best_x, best_f = x, fx
    assert best_x is not None
    return ThresholdAction(tuple(best_x.tolist()))


class GreedyAgent:
    """Agent-interface wrapper; the step index is ignored by design."""

    def __init__(self, env, config: GreedyConfig | None = None):
        self.env = env
        self.config = config or GreedyConfig()

    def act(self, state, h: int, rng: np.random.Generator) -> ThresholdAction:
        return greedy_act(self.env, state, self.config, rng)
