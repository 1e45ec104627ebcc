"""Learned feature map phi(s, a) with simplex-normalized output.

A small dense network maps (state, action) to a probability vector of
dimension d; two bias-free linear heads predict per-step reward and
utility from phi. The trunk is hand-rolled with explicit backpropagation
so gradient correctness is checkable against finite differences, and the
optimizer is classic adaptive-moment descent with L2 weight decay folded
into the gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fairdyn.core import FairdynError, ThresholdAction, ValidationError
from fairdyn.io import read_arrays, write_arrays


class TrainingError(FairdynError):
    """Training diverged (non-finite loss)."""

    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class FeatureMapConfig:
    """Architecture: input width, hidden trunk sizes, output dimension d.

    The desk-scale default (hidden 64-32, d=16) trains in seconds; passing
    hidden=(256, 128, 64) with output_dim=64 restores the full-scale sizes.
    logit_gain bounds the pre-softmax logits to the ball of that radius;
    without the bound, weight growth during training collapses the simplex
    output onto a vertex and the gradient through the softmax vanishes.
    """

    input_dim: int
    hidden: tuple[int, ...] = (64, 32)
    output_dim: int = 16
    logit_gain: float = 5.0

    def __post_init__(self) -> None:
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(not isinstance(v, int) or v < 1 for v in dims):
            raise ValidationError(f"all layer sizes must be positive ints, got {dims}")
        if not (self.logit_gain > 0.0 and math.isfinite(self.logit_gain)):
            raise ValidationError(f"logit_gain must be positive and finite, got {self.logit_gain}")


@dataclass(frozen=True)
class OptConfig:
    """Optimizer and schedule knobs for feature-map training."""

    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    holdout_fraction: float = 0.1


class FeatureMap:
    """Frozen-weights feature map; deterministic given inputs.

    Layers alternate dense + rectifier, with a final dense layer followed
    by a softmax so the output lies on the probability simplex (hence
    ||phi||_1 = 1 and ||phi||_2 <= 1). The final logits are rescaled to
    gain * z / sqrt(1 + ||z||^2) before the softmax, which caps how peaked
    the simplex output can get.
    """

    def __init__(self, config: FeatureMapConfig, weights: list[np.ndarray], biases: list[np.ndarray]):
        dims = (config.input_dim, *config.hidden, config.output_dim)
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise ValidationError("layer count does not match the architecture")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValidationError(f"layer {i} has shape {w.shape}, expected {(dims[i], dims[i+1])}")
        self.config = config
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        """Feature vectors for a batch of raw inputs, shape (N, d)."""
        return self._forward(np.asarray(inputs, dtype=np.float64))[-1]

    def phi(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Features for stacked (state, action) pairs."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        return self(np.hstack([states, actions]))

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        """All layer activations; the last entry is the simplex output."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        # bounded logits, then softmax with max subtraction
        z = acts[-1]
        s = np.sqrt(1.0 + np.sum(z * z, axis=1, keepdims=True))
        z = self.config.logit_gain * z / s
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        acts[-1] = e / e.sum(axis=1, keepdims=True)
        return acts

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        arrays.update(extra or {})
        write_arrays(
            path,
            {
                "kind": "feature_map",
                "input_dim": self.config.input_dim,
                "hidden": list(self.config.hidden),
                "output_dim": self.config.output_dim,
                "logit_gain": self.config.logit_gain,
                "activation": "relu",
                "normalization": "softmax",
            },
            arrays,
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["FeatureMap", dict[str, np.ndarray]]:
        """Load a map; returns it plus any extra arrays stored alongside."""
        meta, arrays = read_arrays(path)
        if meta.get("kind") != "feature_map":
            raise ValidationError(f"{path} does not contain a feature map")
        config = FeatureMapConfig(
            input_dim=int(meta["input_dim"]),
            hidden=tuple(int(h) for h in meta["hidden"]),
            output_dim=int(meta["output_dim"]),
            logit_gain=float(meta["logit_gain"]),
        )
        n_layers = len(config.hidden) + 1
        weights = [arrays.pop(f"w{i}") for i in range(n_layers)]
        biases = [arrays.pop(f"b{i}") for i in range(n_layers)]
        return cls(config, weights, biases), arrays


@dataclass(frozen=True)
class RolloutBuffer:
    """Random-policy interaction samples used to fit the feature map."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    utilities: np.ndarray

    def __post_init__(self) -> None:
        n = self.states.shape[0]
        if n < 1:
            raise ValidationError("rollout buffer must contain at least one sample")
        if not (self.actions.shape[0] == self.rewards.shape[0] == self.utilities.shape[0] == n):
            raise ValidationError("buffer arrays must align row-wise")
        for name in ("rewards", "utilities"):
            v = getattr(self, name)
            if np.any(v < 0.0) or np.any(v > 1.0):
                raise ValidationError(f"{name} must lie in [0, 1]")

    @property
    def size(self) -> int:
        return int(self.states.shape[0])

    def inputs(self) -> np.ndarray:
        return np.hstack([self.states, self.actions])


def collect_rollouts(env, n_samples: int, rng: np.random.Generator) -> RolloutBuffer:
    """Gather (s, a, r, g) tuples under uniform-random actions.

    Interaction is episode-structured: the environment resets every
    ``env.horizon`` steps from its initial-state law.
    """
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
    n = env.n_groups
    states = np.empty((n_samples, n))
    actions = np.empty((n_samples, n))
    rewards = np.empty(n_samples)
    utilities = np.empty(n_samples)
    state = env.initial_state(rng)
    step_in_episode = 0
    for i in range(n_samples):
        if step_in_episode == env.horizon:
            state = env.initial_state(rng)
            step_in_episode = 0
        action = ThresholdAction(tuple(rng.random(n).tolist()))
        step_loss, step_disp, _ = env.step_metrics(state, action)
        states[i] = state.as_array()
        actions[i] = action.as_array()
        rewards[i] = 1.0 - step_loss
        utilities[i] = 1.0 - step_disp
        state = env.transition(state, action)
        step_in_episode += 1
    return RolloutBuffer(states, actions, rewards, utilities)


@dataclass
class TrainResult:
    """Trained feature map, its two reward heads, and training diagnostics."""

    feature_map: FeatureMap
    head_r: np.ndarray
    head_g: np.ndarray
    loss_history: list[float]
    holdout_mse_r: float
    holdout_mse_g: float

    def predict(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        phi = self.feature_map.phi(states, actions)
        return phi @ self.head_r, phi @ self.head_g

    def save(self, path: str | Path) -> None:
        self.feature_map.save(
            path,
            extra={
                "head_r": self.head_r,
                "head_g": self.head_g,
                "loss_history": np.asarray(self.loss_history),
                "holdout_mse": np.array([self.holdout_mse_r, self.holdout_mse_g]),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrainResult":
        fmap, extra = FeatureMap.load(path)
        mse = extra["holdout_mse"]
        return cls(
            feature_map=fmap,
            head_r=extra["head_r"],
            head_g=extra["head_g"],
            loss_history=extra["loss_history"].tolist(),
            holdout_mse_r=float(mse[0]),
            holdout_mse_g=float(mse[1]),
        )


class FeatureMapTrainer:
    """Explicit forward/backward machinery over a parameter vector.

    Exposes flat-parameter access and a loss/gradient evaluation so
    gradient correctness can be checked externally against central finite
    differences. Parameters are the trunk weights and biases plus the two
    heads, in layer order.
    """

    def __init__(self, config: FeatureMapConfig, rng: np.random.Generator):
        self.config = config
        dims = (config.input_dim, *config.hidden, config.output_dim)
        self.weights = []
        self.biases = []
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            # He-style scale suits the rectifier trunk, but the pre-softmax
            # layer must start near zero: logits of He magnitude collapse the
            # simplex output onto a vertex, and a one-hot softmax passes no
            # gradient back into the trunk.
            scale = 0.01 if i == last else math.sqrt(2.0 / fan_in)
            self.weights.append(rng.standard_normal((dims[i], dims[i + 1])) * scale)
            self.biases.append(np.zeros(dims[i + 1]))
        self.head_r = np.zeros(config.output_dim)
        self.head_g = np.zeros(config.output_dim)

    # -- parameter vector plumbing -----------------------------------------

    def _param_list(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.head_r, self.head_g]

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._param_list()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self._param_list():
            n = p.size
            p[...] = flat[offset : offset + n].reshape(p.shape)
            offset += n
        if offset != flat.size:
            raise ValidationError(f"parameter vector has {flat.size} entries, expected {offset}")

    # -- forward / backward -------------------------------------------------

    def loss_and_grads(
        self, x: np.ndarray, r: np.ndarray, g: np.ndarray
    ) -> tuple[float, np.ndarray]:
        """Summed-head MSE and its gradient as a flat vector."""
        n = x.shape[0]
        pre = []
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        gain = self.config.logit_gain
        z_raw = pre[-1]
        s = np.sqrt(1.0 + np.sum(z_raw * z_raw, axis=1, keepdims=True))
        z_b = gain * z_raw / s
        z_out = z_b - z_b.max(axis=1, keepdims=True)
        e = np.exp(z_out)
        phi = e / e.sum(axis=1, keepdims=True)

        pred_r = phi @ self.head_r
        pred_g = phi @ self.head_g
        err_r = pred_r - r
        err_g = pred_g - g
        value = float(err_r @ err_r + err_g @ err_g) / n

        d_pred_r = 2.0 * err_r / n
        d_pred_g = 2.0 * err_g / n
        grad_head_r = phi.T @ d_pred_r
        grad_head_g = phi.T @ d_pred_g
        d_phi = np.outer(d_pred_r, self.head_r) + np.outer(d_pred_g, self.head_g)
        # softmax backward: dz = phi * (dphi - sum(dphi * phi))
        inner = np.sum(d_phi * phi, axis=1, keepdims=True)
        d_zb = phi * (d_phi - inner)
        # logit-bound backward: z_b = gain * z / s with s = sqrt(1 + ||z||^2)
        proj = np.sum(d_zb * z_raw, axis=1, keepdims=True) / (s * s)
        d_z = (gain / s) * (d_zb - proj * z_raw)

        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            grad_w[i] = acts[i].T @ d_z
            grad_b[i] = d_z.sum(axis=0)
            if i > 0:
                d_h = d_z @ self.weights[i].T
                d_z = d_h * (pre[i - 1] > 0.0)

        flat = np.concatenate(
            [g_.ravel() for g_ in grad_w]
            + [g_.ravel() for g_ in grad_b]
            + [grad_head_r.ravel(), grad_head_g.ravel()]
        )
        return value, flat

    def loss(self, x: np.ndarray, r: np.ndarray, g: np.ndarray) -> float:
        return self.loss_and_grads(x, r, g)[0]

    def freeze(self) -> FeatureMap:
        return FeatureMap(
            self.config,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def train_feature_map(
    buffer: RolloutBuffer,
    arch: FeatureMapConfig | None = None,
    opt: OptConfig = OptConfig(),
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Fit the feature map and reward heads on rollout data.

    Minimizes the summed mean-squared error of both heads with classic
    adaptive-moment descent (decay folded into gradients). Raises
    TrainingError with the step index if the loss leaves the finite range.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if arch is None:
        arch = FeatureMapConfig(input_dim=buffer.inputs().shape[1])
    trainer = FeatureMapTrainer(arch, rng)

    x_all = buffer.inputs()
    r_all = buffer.rewards
    g_all = buffer.utilities
    n = x_all.shape[0]
    n_holdout = int(n * opt.holdout_fraction)
    perm = rng.permutation(n)
    hold, train = perm[:n_holdout], perm[n_holdout:]
    if train.size == 0:
        train, hold = perm, perm[:0]
    x_tr, r_tr, g_tr = x_all[train], r_all[train], g_all[train]

    params = trainer.get_flat_params()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history: list[float] = []
    n_train = x_tr.shape[0]
    for _ in range(opt.epochs):
        order = rng.permutation(n_train)
        for lo in range(0, n_train, opt.batch_size):
            idx = order[lo : lo + opt.batch_size]
            value, grads = trainer.loss_and_grads(x_tr[idx], r_tr[idx], g_tr[idx])
            if not math.isfinite(value):
                raise TrainingError(step)
            step += 1
            history.append(value)
            grads = grads + opt.weight_decay * params
            m = beta1 * m + (1.0 - beta1) * grads
            v = beta2 * v + (1.0 - beta2) * grads * grads
            m_hat = m / (1.0 - beta1**step)
            v_hat = v / (1.0 - beta2**step)
            params = params - opt.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            trainer.set_flat_params(params)

    if hold.size:
        phi_h = trainer.freeze()(x_all[hold])
        mse_r = float(np.mean((phi_h @ trainer.head_r - r_all[hold]) ** 2))
        mse_g = float(np.mean((phi_h @ trainer.head_g - g_all[hold]) ** 2))
    else:
        phi_t = trainer.freeze()(x_tr)
        mse_r = float(np.mean((phi_t @ trainer.head_r - r_tr) ** 2))
        mse_g = float(np.mean((phi_t @ trainer.head_g - g_tr) ** 2))

    return TrainResult(
        feature_map=trainer.freeze(),
        head_r=trainer.head_r.copy(),
        head_g=trainer.head_g.copy(),
        loss_history=history,
        holdout_mse_r=mse_r,
        holdout_mse_g=mse_g,
    )


def estimate_lipschitz_rho(
    feature_map: FeatureMap,
    state_dim: int,
    action_dim: int,
    probes: int,
    rng: np.random.Generator,
) -> float:
    """Empirical action-Lipschitz constant of the feature map.

    Max over probe pairs (same state, two actions) of the feature distance
    to action distance ratio. Pairs with numerically identical actions are
    skipped.
    """
    rho = 0.0
    for _ in range(probes):
        s = rng.random(state_dim)
        a1 = rng.random(action_dim)
        a2 = rng.random(action_dim)
        gap = float(np.linalg.norm(a1 - a2))
        if gap < 1e-12:
            continue
        f1 = feature_map.phi(s, a1)[0]
        f2 = feature_map.phi(s, a2)[0]
        rho = max(rho, float(np.linalg.norm(f1 - f2)) / gap)
    return rho
