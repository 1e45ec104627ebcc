"""Constrained least-squares value iteration with optimism and a dual update.

Per episode: a backward pass refits per-step ridge weights for both the
reward and the utility metric against replayed history (targets bootstrap
through the next step's optimistic values), a forward pass samples actions
from a softmax over Voronoi loci followed by a uniform draw inside the
chosen region, and the scalarization dual variable takes one clipped
ascent step on the constraint violation.

State is kept in flat arrays sized by a history window so the replay inner
loop runs through the kernel backend (compiled or NumPy) without copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fairdyn import kernels
from fairdyn.core import (
    ConfigError,
    EpisodeRecord,
    StepRecord,
    ThresholdAction,
    ValidationError,
    seed_rng,
)
from fairdyn.io import read_arrays, write_arrays
from fairdyn.metrics import RegretLedger
from fairdyn.voronoi import VoronoiActionSpace, sample_uniform_in_region


@dataclass(frozen=True)
class UcbFairConfig:
    """Hyperparameters; None selects the theoretical formula where one exists.

    dual_ceiling bounds the dual variable (the analysis sets it to
    horizon/slack, with slack defaulting to horizon/10, hence 10).
    dual_step defaults to dual_ceiling/sqrt(K*H^2). temperature defaults to
    log(M)*K/(2*(1+dual_ceiling+horizon)) and bonus to
    c1*d*horizon*sqrt(log(log(M)*4*d*T/p)) with T = K*H; both formulas
    degenerate when the action space has fewer than three loci (log M with
    M = locus_count - 1), in which case explicit values are required.
    """

    horizon: int
    episodes: int
    constraint_level: float
    dual_ceiling: float = 10.0
    dual_step: float | None = None
    temperature: float | None = None
    bonus: float | None = None
    bonus_c1: float = 1.0
    ridge: float = 1.0
    failure_prob: float = 0.01
    history_cap: int = 5000
    refactor_every: int = 64

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.episodes < 1:
            raise ConfigError("horizon and episodes must be >= 1")
        if not 0.0 <= self.constraint_level <= self.horizon:
            raise ConfigError(
                f"constraint_level must lie in [0, horizon], got {self.constraint_level}"
            )
        for name in ("dual_ceiling", "bonus_c1", "ridge"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        for name in ("dual_step", "temperature", "bonus"):
            v = getattr(self, name)
            if v is not None and v <= 0.0:
                raise ConfigError(f"{name} must be positive when given")
        if not 0.0 < self.failure_prob < 1.0:
            raise ConfigError("failure_prob must lie in (0, 1)")
        if self.history_cap < 1 or self.refactor_every < 1:
            raise ConfigError("history_cap and refactor_every must be >= 1")


@dataclass(frozen=True)
class ResolvedParams:
    """Config with every formula-backed default made concrete."""

    horizon: int
    episodes: int
    constraint_level: float
    dual_ceiling: float
    dual_step: float
    temperature: float
    bonus: float
    ridge: float
    failure_prob: float
    history_cap: int
    refactor_every: int
    feature_dim: int
    locus_count: int


def resolve_params(config: UcbFairConfig, feature_dim: int, locus_count: int) -> ResolvedParams:
    """Fill in formula defaults given the feature dimension and locus count."""
    h, k = config.horizon, config.episodes
    big_m = locus_count - 1
    dual_step = config.dual_step
    if dual_step is None:
        dual_step = config.dual_ceiling / math.sqrt(k * h * h)
    temperature = config.temperature
    if temperature is None:
        if big_m < 2:
            raise ConfigError(
                "the temperature formula log(M)*K/(2*(1+V+H)) degenerates for "
                f"locus_count={locus_count}; pass temperature explicitly"
            )
        temperature = math.log(big_m) * k / (2.0 * (1.0 + config.dual_ceiling + h))
    bonus = config.bonus
    if bonus is None:
        if big_m < 2:
            raise ConfigError(
                "the bonus formula needs log(M) > 0; pass bonus explicitly for "
                f"locus_count={locus_count}"
            )
        t_total = k * h
        zeta_arg = math.log(big_m) * 4.0 * feature_dim * t_total / config.failure_prob
        if zeta_arg <= 1.0:
            raise ConfigError("bonus formula argument <= 1; pass bonus explicitly")
        bonus = config.bonus_c1 * feature_dim * h * math.sqrt(math.log(zeta_arg))
    return ResolvedParams(
        horizon=h,
        episodes=k,
        constraint_level=config.constraint_level,
        dual_ceiling=config.dual_ceiling,
        dual_step=dual_step,
        temperature=temperature,
        bonus=bonus,
        ridge=config.ridge,
        failure_prob=config.failure_prob,
        history_cap=config.history_cap,
        refactor_every=config.refactor_every,
        feature_dim=feature_dim,
        locus_count=locus_count,
    )


# -- standalone algorithm pieces (shared by the agent and by tests) ----------


def softmax_policy(
    q_r: np.ndarray, q_g: np.ndarray, temperature: float, nu: float
) -> np.ndarray:
    """Locus probabilities exp(temp*(q_r + nu*q_g)) normalized, overflow-safe."""
    logits = temperature * (np.asarray(q_r) + nu * np.asarray(q_g))
    logits = logits - logits.max()
    probs = np.exp(logits)
    return probs / probs.sum()


def value_estimate(probs: np.ndarray, q: np.ndarray, horizon: float) -> float:
    """V = sum(probs * Q), clipped into [0, horizon]."""
    probs = np.asarray(probs, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if probs.shape != q.shape:
        raise ValidationError(f"probs shape {probs.shape} != q shape {q.shape}")
    return float(min(max(float(probs @ q), 0.0), horizon))


def dual_update(
    nu: float, dual_step: float, dual_ceiling: float, constraint_level: float, v_g1: float
) -> float:
    """Clipped ascent on the constraint violation c - V_g."""
    return min(max(nu + dual_step * (constraint_level - v_g1), 0.0), dual_ceiling)


@dataclass
class TrainOutput:
    """Ledger plus per-episode training-curve columns."""

    ledger: RegretLedger
    episodes: list[int]
    mean_loss: list[float]
    mean_disparity: list[float]
    est_v_r1: list[float]
    est_v_g1: list[float]
    nu: list[float]
    final_states: list[tuple[float, ...]]


class UcbFairAgent:
    """Stateful learner over a frozen feature map and a Voronoi action space.

    ``phi`` is a callable mapping (states (B, state_dim), actions
    (B, action_dim)) to features (B, d); a trained FeatureMap's ``phi``
    method fits directly. The agent owns per-step Gram matrices, their
    maintained inverses, ridge weights for both metrics, a bounded replay
    window, and the dual variable.
    """

    def __init__(
        self,
        phi: Callable[[np.ndarray, np.ndarray], np.ndarray],
        action_space: VoronoiActionSpace,
        config: UcbFairConfig,
        state_dim: int,
    ):
        probe = phi(np.zeros((1, state_dim)), np.zeros((1, action_space.dims)))
        probe = np.asarray(probe)
        if probe.ndim != 2 or probe.shape[0] != 1:
            raise ValidationError("phi must return a (batch, d) array")
        d = int(probe.shape[1])
        self.phi = phi
        self.space = action_space
        self.state_dim = state_dim
        self.params = resolve_params(config, d, action_space.locus_count)
        p = self.params

        self.gram = np.tile((p.ridge * np.eye(d))[None], (p.horizon, 1, 1))
        self.gram_inv = np.tile((np.eye(d) / p.ridge)[None], (p.horizon, 1, 1))
        self.w_r = np.zeros((p.horizon, d))
        self.w_g = np.zeros((p.horizon, d))
        self.nu = 0.0
        self.episode_count = 0

        cap = min(p.history_cap, p.episodes)
        m1 = p.locus_count
        self._cap = cap
        self._window = 0
        self._slot = 0
        self._phi_taken = np.zeros((cap, p.horizon, d))
        self._rewards = np.zeros((cap, p.horizon))
        self._utils = np.zeros((cap, p.horizon))
        self._next_blocks = np.zeros((cap, p.horizon, m1, d))

    # -- feature plumbing ---------------------------------------------------

    @staticmethod
    def _vec(state) -> np.ndarray:
        if hasattr(state, "as_array"):
            return state.as_array()
        return np.asarray(state, dtype=np.float64)

    def locus_block(self, state) -> np.ndarray:
        """Features of every locus at ``state``: (locus_count, d)."""
        s = self._vec(state)
        tiled = np.broadcast_to(s, (self.params.locus_count, s.shape[0]))
        return np.ascontiguousarray(self.phi(tiled, self.space.loci))

    # -- policy -------------------------------------------------------------

    def locus_q_values(self, state, h: int, block: np.ndarray | None = None):
        """Optimistic (q_r, q_g) at each locus for step h (1-based)."""
        if not 1 <= h <= self.params.horizon:
            raise ValidationError(f"step h={h} outside [1, {self.params.horizon}]")
        if block is None:
            block = self.locus_block(state)
        return kernels.locus_values(
            block,
            self.gram_inv[h - 1],
            self.w_r[h - 1],
            self.w_g[h - 1],
            self.params.bonus,
            float(self.params.horizon),
        )

    def locus_probabilities(self, state, h: int, block: np.ndarray | None = None) -> np.ndarray:
        q_r, q_g = self.locus_q_values(state, h, block)
        return softmax_policy(q_r, q_g, self.params.temperature, self.nu)

    def act(self, state, h: int, rng: np.random.Generator) -> ThresholdAction:
        """Sample a locus from the softmax, then uniformly within its region."""
        probs = self.locus_probabilities(state, h)
        locus = int(rng.choice(self.params.locus_count, p=probs))
        return sample_uniform_in_region(self.space, locus, rng)

    def state_values(self, state, h: int = 1, block: np.ndarray | None = None):
        """Policy value estimates (V_r, V_g) at ``state`` for step h."""
        if block is None:
            block = self.locus_block(state)
        q_r, q_g = self.locus_q_values(state, h, block)
        probs = softmax_policy(q_r, q_g, self.params.temperature, self.nu)
        hor = float(self.params.horizon)
        return value_estimate(probs, q_r, hor), value_estimate(probs, q_g, hor)

    # -- learning -----------------------------------------------------------

    @property
    def window_size(self) -> int:
        return self._window

    def backward_pass(self) -> None:
        """Refit w_{r,h}, w_{g,h} for all h from the replay window.

        Sweeps h = H..1; regression targets bootstrap through the values of
        step h+1 evaluated at each stored next state (zero beyond the
        horizon). With an empty window all weights stay zero, leaving
        bonus-only optimism.
        """
        w = self.window_size
        p = self.params
        if w == 0:
            self.w_r.fill(0.0)
            self.w_g.fill(0.0)
            return
        hor = float(p.horizon)
        for i in range(p.horizon - 1, -1, -1):
            if i == p.horizon - 1:
                t_r = self._rewards[:w, i]
                t_g = self._utils[:w, i]
            else:
                v_r, v_g = kernels.batch_state_values(
                    self._next_blocks[:w, i],
                    self.gram_inv[i + 1],
                    self.w_r[i + 1],
                    self.w_g[i + 1],
                    p.bonus,
                    p.temperature,
                    self.nu,
                    hor,
                )
                t_r = self._rewards[:w, i] + v_r
                t_g = self._utils[:w, i] + v_g
            phis = self._phi_taken[:w, i]
            self.w_r[i] = self.gram_inv[i] @ (phis.T @ t_r)
            self.w_g[i] = self.gram_inv[i] @ (phis.T @ t_g)

    def _store_episode(
        self,
        phi_taken: np.ndarray,
        rewards: np.ndarray,
        utils: np.ndarray,
        next_blocks: np.ndarray,
    ) -> None:
        """Insert an episode into the window, evicting the oldest if full."""
        slot = self._slot
        if self._window == self._cap:
            for i in range(self.params.horizon):
                old = self._phi_taken[slot, i]
                self.gram[i] -= np.outer(old, old)
                kernels.rank_one_update(self.gram_inv[i], old, sign=-1.0)
        else:
            self._window += 1
        self._phi_taken[slot] = phi_taken
        self._rewards[slot] = rewards
        self._utils[slot] = utils
        self._next_blocks[slot] = next_blocks
        for i in range(self.params.horizon):
            new = phi_taken[i]
            self.gram[i] += np.outer(new, new)
            kernels.rank_one_update(self.gram_inv[i], new, sign=1.0)
        self._slot = (slot + 1) % self._cap
        self.episode_count += 1
        if self.episode_count % self.params.refactor_every == 0:
            self.refactor_inverses()

    def refactor_inverses(self) -> None:
        """Recompute every maintained inverse from its Gram matrix."""
        for i in range(self.params.horizon):
            self.gram_inv[i] = np.linalg.inv(self.gram[i])

    def inverse_drift(self) -> float:
        """Max Frobenius gap between maintained and direct inverses."""
        worst = 0.0
        for i in range(self.params.horizon):
            direct = np.linalg.inv(self.gram[i])
            worst = max(worst, float(np.linalg.norm(self.gram_inv[i] - direct)))
        return worst

    def train(
        self,
        env,
        rng: np.random.Generator | None = None,
        seed: int = 0,
        oracle=None,
        initial_states: Sequence | None = None,
        on_episode: Callable[[EpisodeRecord], None] | None = None,
    ) -> TrainOutput:
        """Run the full episodic loop for the configured number of episodes.

        ``oracle`` (optional) must expose value_at(state); when absent the
        ledger's oracle and regret columns stay empty. ``initial_states``
        overrides the environment's initial-state law (entry k is used for
        episode k+1, cycling if shorter than the run). ``on_episode``
        receives each completed EpisodeRecord; when omitted, per-step
        records are not retained.
        """
        p = self.params
        if rng is None:
            rng = seed_rng(seed, "ucbfair/train")
        ledger = RegretLedger(constraint_level=p.constraint_level)
        out = TrainOutput(
            ledger=ledger,
            episodes=[],
            mean_loss=[],
            mean_disparity=[],
            est_v_r1=[],
            est_v_g1=[],
            nu=[],
            final_states=[],
        )
        hor = p.horizon
        d = p.feature_dim
        m1 = p.locus_count

        for k in range(1, p.episodes + 1):
            if initial_states is not None:
                state = initial_states[(k - 1) % len(initial_states)]
            else:
                state = env.initial_state(rng)
            start_state = state

            self.backward_pass()

            phi_taken = np.empty((hor, d))
            rewards = np.empty(hor)
            utils = np.empty(hor)
            next_blocks = np.empty((hor, m1, d))
            losses = np.empty(hor)
            disps = np.empty(hor)
            steps: list[StepRecord] | None = [] if on_episode is not None else None

            block = self.locus_block(state)
            start_block = block
            for i in range(hor):
                h = i + 1
                probs = self.locus_probabilities(state, h, block)
                locus = int(rng.choice(m1, p=probs))
                action = sample_uniform_in_region(self.space, locus, rng)
                step_loss, step_disp, _ = env.step_metrics(state, action)
                next_state = env.transition(state, action)

                s_vec = self._vec(state)
                phi_taken[i] = self.phi(s_vec[None, :], action.as_array()[None, :])[0]
                rewards[i] = 1.0 - step_loss
                utils[i] = 1.0 - step_disp
                losses[i] = step_loss
                disps[i] = step_disp
                if steps is not None and hasattr(state, "qualification_rates"):
                    steps.append(
                        StepRecord.from_metrics(state, action, step_loss, step_disp)
                    )
                block = self.locus_block(next_state)
                next_blocks[i] = block
                state = next_state

            v_r1, v_g1 = self.state_values(start_state, 1, block=start_block)
            self.nu = dual_update(
                self.nu, p.dual_step, p.dual_ceiling, p.constraint_level, v_g1
            )

            v_r_real = float(rewards.sum())
            v_g_real = float(utils.sum())
            oracle_value = None
            if oracle is not None:
                oracle_value = oracle.value_at(start_state)
            ledger.update(v_r_real, v_g_real, oracle_value)

            self._store_episode(phi_taken, rewards, utils, next_blocks)

            out.episodes.append(k)
            out.mean_loss.append(float(losses.mean()))
            out.mean_disparity.append(float(disps.mean()))
            out.est_v_r1.append(v_r1)
            out.est_v_g1.append(v_g1)
            out.nu.append(self.nu)
            out.final_states.append(tuple(self._vec(state).tolist()))
            if on_episode is not None and steps:
                on_episode(EpisodeRecord.from_steps(steps, {"episode": k}))
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path, include_history: bool = True) -> None:
        """Checkpoint Gram matrices, weights, dual state, and episode counter.

        With ``include_history`` the replay window is stored too, making a
        resumed run bitwise-identical to an uninterrupted one; without it a
        resumed agent can act but refits from an empty window.
        """
        p = self.params
        arrays = {
            "gram": self.gram,
            "gram_inv": self.gram_inv,
            "w_r": self.w_r,
            "w_g": self.w_g,
        }
        if include_history:
            w = self.window_size
            arrays.update(
                phi_taken=self._phi_taken[:w],
                rewards=self._rewards[:w],
                utils=self._utils[:w],
                next_blocks=self._next_blocks[:w],
            )
        meta = {
            "kind": "ucbfair_checkpoint",
            "nu": self.nu,
            "episode_count": self.episode_count,
            "state_dim": self.state_dim,
            "include_history": include_history,
            "params": {
                "horizon": p.horizon,
                "episodes": p.episodes,
                "constraint_level": p.constraint_level,
                "dual_ceiling": p.dual_ceiling,
                "dual_step": p.dual_step,
                "temperature": p.temperature,
                "bonus": p.bonus,
                "ridge": p.ridge,
                "failure_prob": p.failure_prob,
                "history_cap": p.history_cap,
                "refactor_every": p.refactor_every,
            },
        }
        write_arrays(path, meta, arrays)

    @classmethod
    def load(
        cls,
        path: str | Path,
        phi: Callable[[np.ndarray, np.ndarray], np.ndarray],
        action_space: VoronoiActionSpace,
    ) -> "UcbFairAgent":
        """Restore a checkpoint; the feature map and action space are supplied
        by the caller since they persist separately."""
        meta, arrays = read_arrays(path)
        if meta.get("kind") != "ucbfair_checkpoint":
            raise ValidationError(f"{path} is not an agent checkpoint")
        cfg_fields = meta["params"]
        config = UcbFairConfig(
            horizon=int(cfg_fields["horizon"]),
            episodes=int(cfg_fields["episodes"]),
            constraint_level=float(cfg_fields["constraint_level"]),
            dual_ceiling=float(cfg_fields["dual_ceiling"]),
            dual_step=float(cfg_fields["dual_step"]),
            temperature=float(cfg_fields["temperature"]),
            bonus=float(cfg_fields["bonus"]),
            ridge=float(cfg_fields["ridge"]),
            failure_prob=float(cfg_fields["failure_prob"]),
            history_cap=int(cfg_fields["history_cap"]),
            refactor_every=int(cfg_fields["refactor_every"]),
        )
        agent = cls(phi, action_space, config, state_dim=int(meta["state_dim"]))
        agent.gram[...] = arrays["gram"]
        agent.gram_inv[...] = arrays["gram_inv"]
        agent.w_r[...] = arrays["w_r"]
        agent.w_g[...] = arrays["w_g"]
        agent.nu = float(meta["nu"])
        agent.episode_count = int(meta["episode_count"])
        if meta.get("include_history"):
            w = arrays["phi_taken"].shape[0]
            agent._phi_taken[:w] = arrays["phi_taken"]
            agent._rewards[:w] = arrays["rewards"]
            agent._utils[:w] = arrays["utils"]
            agent._next_blocks[:w] = arrays["next_blocks"]
            agent._window = w
            agent._slot = agent.episode_count % agent._cap
        return agent
