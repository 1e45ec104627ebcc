"""A two-state, two-region linear MDP with an exact constrained optimum.

The chain exists to benchmark the learner's regret and constraint
bookkeeping end to end without approximation slack: features are exact
one-hot indicators over (state, region), so the ridge regression is
well-specified, and the constrained optimum comes from a small
occupancy-measure linear program.

States are one-hot vectors s0=[1,0], s1=[0,1]. The single threshold action
falls into one of two hand-built lattice regions with loci {0, 1}; region 0
([0, 1/2]) leads to s0 and region 1 ([1/2, 1]) to s1, deterministically.
The reward depends on the state only (0.1 at s0, 0.9 at s1) and the
constrained metric on the region only (0.9 at region 0, 0.5 at region 1).
Always playing region 1 earns V_r = 3.7 and V_g = 2.5 over the default
horizon 5, so any constraint level at or below 2.5 leaves the
unconstrained optimum feasible.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from fairdyn.core import ThresholdAction, ValidationError
from fairdyn.voronoi import VoronoiActionSpace, locus_of, locus_of_batch

STATE_REWARDS = (0.1, 0.9)
REGION_UTILS = (0.9, 0.5)
# transition law per region: probability of landing in s1
REGION_TO_S1 = (0.0, 1.0)


def toy_action_space() -> VoronoiActionSpace:
    """Two hand-placed loci {0, 1} on the unit interval.

    Built directly rather than through the epsilon lattice formula, whose
    point counts jump from one locus to three around epsilon = 1/2.
    """
    return VoronoiActionSpace(
        dims=1,
        axis_points=np.array([0.0, 1.0]),
        loci=np.array([[0.0], [1.0]]),
        cover_radius=0.5,
        region_measures=np.array([0.5, 0.5]),
        requested_epsilon=0.5,
    )


class ToyChainEnv:
    """Environment facade matching the learner's protocol.

    step_metrics reports (1 - reward, 1 - utility, None) so the learner's
    r = 1 - loss convention recovers the chain's payoffs exactly.
    """

    state_dim = 2
    action_dim = 1

    def __init__(self, horizon: int = 5):
        self.horizon = int(horizon)
        self.space = toy_action_space()

    @staticmethod
    def state_index(state: np.ndarray) -> int:
        s = np.asarray(state, dtype=np.float64)
        if s.shape != (2,) or not (s[0] in (0.0, 1.0) and s[1] == 1.0 - s[0]):
            raise ValidationError(f"toy states are one-hot pairs, got {s!r}")
        return int(s[1])

    def region_of(self, action: ThresholdAction | np.ndarray) -> int:
        return locus_of(self.space, action)

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([1.0, 0.0])

    def step_metrics(self, state, action) -> tuple[float, float, None]:
        s = self.state_index(np.asarray(state))
        g = REGION_UTILS[self.region_of(action)]
        return 1.0 - STATE_REWARDS[s], 1.0 - g, None

    def transition(self, state, action) -> np.ndarray:
        region = self.region_of(action)
        if REGION_TO_S1[region] >= 0.5:
            return np.array([0.0, 1.0])
        return np.array([1.0, 0.0])

    def phi(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Exact features: one-hot over (state, region), d = 4."""
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        n = states.shape[0]
        out = np.zeros((n, 4))
        regions = locus_of_batch(self.space, actions)
        s_idx = (states[:, 1] > 0.5).astype(int)
        out[np.arange(n), s_idx * 2 + regions] = 1.0
        return out

    # -- exact evaluation -----------------------------------------------------

    def policy_values(self, policy) -> tuple[float, float]:
        """Exact (V_r, V_g) from the start state for a region policy.

        ``policy(state_index, h)`` returns a probability vector over the
        two regions for the 1-based step h. Evaluation is a backward pass
        over the two states.
        """
        v_r = np.zeros(2)
        v_g = np.zeros(2)
        for h in range(self.horizon, 0, -1):
            new_r = np.zeros(2)
            new_g = np.zeros(2)
            for s in (0, 1):
                probs = np.asarray(policy(s, h), dtype=np.float64)
                if probs.shape != (2,) or abs(probs.sum() - 1.0) > 1e-9:
                    raise ValidationError("policy must return a 2-point distribution")
                exp_next_r = 0.0
                exp_next_g = 0.0
                exp_g = 0.0
                for a in range(2):
                    p1 = REGION_TO_S1[a]
                    exp_next_r += probs[a] * ((1.0 - p1) * v_r[0] + p1 * v_r[1])
                    exp_next_g += probs[a] * ((1.0 - p1) * v_g[0] + p1 * v_g[1])
                    exp_g += probs[a] * REGION_UTILS[a]
                new_r[s] = STATE_REWARDS[s] + exp_next_r
                new_g[s] = exp_g + exp_next_g
            v_r, v_g = new_r, new_g
        return float(v_r[0]), float(v_g[0])

    def constrained_optimum(self, constraint_level: float) -> tuple[bool, float]:
        """(feasible, best V_r subject to V_g >= level) via an occupancy LP.

        Variables are occupancies x[h, s, a] with flow conservation; the
        LP optimum over this polytope equals the optimum over (possibly
        randomized, step-dependent) policies.
        """
        h_total = self.horizon
        n_var = h_total * 2 * 2

        def idx(h: int, s: int, a: int) -> int:
            return (h * 2 + s) * 2 + a

        reward_coeff = np.zeros(n_var)
        util_coeff = np.zeros(n_var)
        for h in range(h_total):
            for s in (0, 1):
                for a in (0, 1):
                    reward_coeff[idx(h, s, a)] = STATE_REWARDS[s]
                    util_coeff[idx(h, s, a)] = REGION_UTILS[a]

        a_eq = np.zeros((2 * h_total, n_var))
        b_eq = np.zeros(2 * h_total)
        for s in (0, 1):
            for a in (0, 1):
                a_eq[s, idx(0, s, a)] = 1.0
        b_eq[0] = 1.0
        for h in range(1, h_total):
            for s_next in (0, 1):
                row = 2 * h + s_next
                for a in (0, 1):
                    a_eq[row, idx(h, s_next, a)] = 1.0
                for s in (0, 1):
                    for a in (0, 1):
                        p1 = REGION_TO_S1[a]
                        p_next = p1 if s_next == 1 else 1.0 - p1
                        a_eq[row, idx(h - 1, s, a)] -= p_next

        res = linprog(
            c=-reward_coeff,
            A_ub=-util_coeff[None, :],
            b_ub=np.array([-float(constraint_level)]),
            A_eq=a_eq,
            b_eq=b_eq,
            bounds=(0.0, None),
            method="highs",
        )
        if res.status == 2:
            return False, float("nan")
        if res.status != 0:
            raise RuntimeError(f"occupancy LP failed: {res.message}")
        return True, float(-res.fun)


class ToyOracle:
    """Adapter exposing the chain's constrained optimum as value_at()."""

    def __init__(self, env: ToyChainEnv, constraint_level: float):
        feasible, best = env.constrained_optimum(constraint_level)
        if not feasible:
            raise ValidationError(
                f"constraint level {constraint_level} is infeasible on the toy chain"
            )
        self.value = best

    def value_at(self, state) -> float:
        return self.value
