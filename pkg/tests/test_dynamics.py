import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairdyn.core import PopulationState, ThresholdAction, ValidationError, seed_rng
from fairdyn.dynamics import (
    DEFAULT_UTILITY,
    FitnessPair,
    UtilityMatrix,
    fitness,
    fitness_pair,
    replicator_step,
    transition,
)
from fairdyn.features import GaussianScoreModel

rates = st.floats(min_value=0.0, max_value=1.0)
pos_fitness = st.floats(min_value=1e-3, max_value=1e3)


class TestUtilityMatrix:
    def test_default_values(self):
        assert DEFAULT_UTILITY.accept_qualified == 4.0
        assert DEFAULT_UTILITY.accept_unqualified == 5.0
        assert DEFAULT_UTILITY.reject_qualified == 2.0
        assert DEFAULT_UTILITY.reject_unqualified == 1.0

    def test_ordering_enforced(self):
        # acceptance must beat rejection for both labels
        with pytest.raises(ValidationError):
            UtilityMatrix(accept_qualified=1.0, reject_qualified=2.0)
        # qualification must be costly among the accepted
        with pytest.raises(ValidationError):
            UtilityMatrix(accept_qualified=5.0, accept_unqualified=4.0)
        # and must pay among the rejected
        with pytest.raises(ValidationError):
            UtilityMatrix(reject_qualified=1.0, reject_unqualified=2.0)

    def test_positive(self):
        with pytest.raises(ValidationError):
            UtilityMatrix(reject_unqualified=0.0)

    def test_json_round_trip(self):
        u = UtilityMatrix(4.5, 5.5, 2.5, 1.5)
        assert UtilityMatrix.from_json(u.to_json()) == u


class TestFitness:
    def test_hand_computed(self):
        # W+ = 4*p_q + 2*(1-p_q), W- = 5*p_u + 1*(1-p_u)
        w_plus, w_minus = fitness(0.5, 0.25, DEFAULT_UTILITY)
        assert w_plus[0] == pytest.approx(3.0)
        assert w_minus[0] == pytest.approx(2.0)

    def test_extremes(self):
        w_plus, w_minus = fitness(1.0, 0.0, DEFAULT_UTILITY)
        assert w_plus[0] == 4.0 and w_minus[0] == 1.0
        w_plus, w_minus = fitness(0.0, 1.0, DEFAULT_UTILITY)
        assert w_plus[0] == 2.0 and w_minus[0] == 5.0

    def test_rejects_non_probability(self):
        with pytest.raises(ValidationError):
            fitness(1.2, 0.5, DEFAULT_UTILITY)

    def test_pair_wrapper(self):
        pair = fitness_pair(0.5, 0.25, DEFAULT_UTILITY)
        assert isinstance(pair, FitnessPair)
        assert pair.w_plus == pytest.approx(3.0)

    @given(rates, rates)
    def test_always_positive(self, p_q, p_u):
        w_plus, w_minus = fitness(p_q, p_u, DEFAULT_UTILITY)
        assert np.all(w_plus > 0) and np.all(w_minus > 0)


class TestReplicatorStep:
    def test_hand_computed(self):
        # q=0.5, W+=4, W-=1: 0.5*4 / (0.5*4 + 0.5*1) = 0.8
        assert replicator_step(0.5, 4.0, 1.0)[0] == pytest.approx(0.8)

    @given(st.floats(min_value=0.0, max_value=1.0).filter(lambda q: q in (0.0, 1.0)), pos_fitness, pos_fitness)
    def test_fixed_points(self, q, wp, wm):
        assert replicator_step(q, wp, wm)[0] == q

    def test_fixed_points_exact(self):
        assert replicator_step(0.0, 3.7, 1.1)[0] == 0.0
        assert replicator_step(1.0, 3.7, 1.1)[0] == 1.0

    @given(rates, pos_fitness, pos_fitness)
    def test_range_preserved(self, q, wp, wm):
        out = replicator_step(q, wp, wm)[0]
        assert 0.0 <= out <= 1.0

    @given(st.floats(min_value=1e-6, max_value=1 - 1e-6), pos_fitness, pos_fitness)
    def test_monotone_sign(self, q, wp, wm):
        """Interior q moves toward the fitter label and never crosses it."""
        out = replicator_step(q, wp, wm)[0]
        if wp > wm:
            assert out >= q
        elif wp < wm:
            assert out <= q
        else:
            assert out == pytest.approx(q)

    def test_vectorized(self):
        q = np.array([0.2, 0.5, 0.9])
        out = replicator_step(q, np.array([4.0, 4.0, 4.0]), np.array([1.0, 1.0, 1.0]))
        assert out.shape == (3,)
        assert np.all(np.diff(out) > 0)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValidationError):
            replicator_step(1.5, 1.0, 1.0)
        with pytest.raises(ValidationError):
            replicator_step(0.5, 0.0, 1.0)


class TestTransition:
    def test_frozen_gaussian_chain(self):
        """Full state transition against independently computed constants.

        At action 0.5 the raw threshold is 1.0, so p_q = Phi(0) = 1/2 and
        p_u = Phi(-2). Fitness and replicator values below were computed
        with math.erf alone.
        """
        model = GaussianScoreModel()
        state = PopulationState((0.3, 0.7))
        nxt = transition(state, ThresholdAction((0.5, 0.5)), DEFAULT_UTILITY, model)
        assert nxt.qualification_rates[0] == pytest.approx(0.5409627938562506, abs=1e-12)
        assert nxt.qualification_rates[1] == pytest.approx(0.8651587620041412, abs=1e-12)

    def test_group_count_checked(self):
        model = GaussianScoreModel()
        with pytest.raises(ValidationError):
            transition(
                PopulationState((0.3, 0.7)), ThresholdAction((0.5,)), DEFAULT_UTILITY, model
            )

    def test_preserves_model_ref(self):
        model = GaussianScoreModel()
        state = PopulationState((0.3, 0.7), "gaussian")
        nxt = transition(state, ThresholdAction((0.5, 0.5)), DEFAULT_UTILITY, model)
        assert nxt.feature_model_ref == "gaussian"

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_monte_carlo_accept_rates(self, seed):
        """MC oracle for the conditional accept rates feeding the transition.

        Simulates the generative story directly: draw labels at rate q,
        scores X ~ N(Y, 1), accept when X >= raw threshold. The closed-form
        rates must sit within 5 standard errors of the sample rates.
        """
        rng = seed_rng(seed, "mc-transition")
        q = float(rng.uniform(0.1, 0.9))
        a = float(rng.uniform(0.2, 0.8))
        model = GaussianScoreModel()
        state = PopulationState((q, q))
        action = ThresholdAction((a, a))
        p_q, p_u = model.conditional_accept_rates(state, action)
        n = 200_000
        labels = np.where(rng.uniform(size=n) < q, 1.0, -1.0)
        scores = labels + rng.standard_normal(n)
        accepted = scores >= model.raw_threshold(np.array([a]))[0]
        for p_hat, p_exact, mask in (
            (accepted[labels > 0].mean(), p_q[0], labels > 0),
            (accepted[labels < 0].mean(), p_u[0], labels < 0),
        ):
            m = int(mask.sum())
            se = max(np.sqrt(p_exact * (1 - p_exact) / m), 1e-6)
            assert abs(p_hat - p_exact) < 5 * se
