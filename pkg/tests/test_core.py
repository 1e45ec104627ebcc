import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairdyn.core import (
    DimensionError,
    EpisodeConfig,
    EpisodeRecord,
    GroupSpec,
    PopulationState,
    StepRecord,
    ThresholdAction,
    ValidationError,
    clamp_action,
    json_dumps,
    seed_rng,
    stable_hash,
)


class TestGroupSpec:
    def test_uniform(self):
        spec = GroupSpec.uniform(2)
        assert spec.group_count == 2
        assert spec.group_fractions == (0.5, 0.5)

    def test_fraction_sum_enforced(self):
        with pytest.raises(ValidationError):
            GroupSpec(2, (0.5, 0.6))

    def test_fraction_bounds(self):
        with pytest.raises(ValidationError):
            GroupSpec(2, (0.0, 1.0))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            GroupSpec(3, (0.5, 0.5))

    def test_min_groups(self):
        with pytest.raises(ValidationError):
            GroupSpec.uniform(1)

    def test_json_round_trip(self):
        spec = GroupSpec(2, (0.25, 0.75))
        assert GroupSpec.from_json(spec.to_json()) == spec


class TestStateAndAction:
    def test_state_range(self):
        with pytest.raises(ValidationError):
            PopulationState((0.5, 1.2))
        with pytest.raises(ValidationError):
            PopulationState((-0.1, 0.5))

    def test_state_non_finite(self):
        with pytest.raises(ValidationError):
            PopulationState((float("nan"), 0.5))

    def test_as_array(self):
        s = PopulationState((0.3, 0.7))
        np.testing.assert_array_equal(s.as_array(), [0.3, 0.7])

    def test_action_range(self):
        with pytest.raises(ValidationError):
            ThresholdAction((1.5, 0.0))

    def test_json_round_trip(self):
        s = PopulationState((0.3, 0.7), "gaussian")
        assert PopulationState.from_json(s.to_json()) == s
        a = ThresholdAction((0.1, 0.9))
        assert ThresholdAction.from_json(a.to_json()) == a

    def test_schema_version_checked(self):
        payload = PopulationState((0.5, 0.5)).to_json()
        payload["fairdyn_schema"] = 99
        with pytest.raises(ValidationError):
            PopulationState.from_json(payload)


class TestEpisodeConfig:
    def test_constraint_level_within_horizon(self):
        with pytest.raises(ValidationError):
            EpisodeConfig(horizon=5, episode_count=10, constraint_level=6.0)

    def test_positive_ints(self):
        with pytest.raises(ValidationError):
            EpisodeConfig(horizon=0, episode_count=10, constraint_level=0.0)
        with pytest.raises(ValidationError):
            EpisodeConfig(horizon=5, episode_count=0, constraint_level=0.0)


class TestStepRecord:
    def _sa(self):
        return PopulationState((0.5, 0.5)), ThresholdAction((0.5, 0.5))

    def test_reward_identity_bitwise(self):
        state, action = self._sa()
        # from_metrics guarantees reward == 1 - loss exactly, including for
        # losses whose complement is not representable the "obvious" way.
        for loss in (0.0, 0.1, 1 / 3, 0.75, 1.0):
            rec = StepRecord.from_metrics(state, action, loss, 0.25)
            assert rec.reward == 1.0 - rec.loss
            assert rec.utility == 1.0 - rec.disparity

    def test_identity_enforced(self):
        state, action = self._sa()
        with pytest.raises(ValidationError):
            StepRecord(state, action, reward=0.5, utility=0.75, loss=0.4, disparity=0.25)

    def test_group_count_mismatch(self):
        with pytest.raises(DimensionError):
            StepRecord.from_metrics(
                PopulationState((0.5, 0.5, 0.5)), ThresholdAction((0.5, 0.5)), 0.1, 0.1
            )

    def test_json_round_trip(self):
        state, action = self._sa()
        rec = StepRecord.from_metrics(state, action, 0.3, 0.1)
        assert StepRecord.from_json(rec.to_json()) == rec


class TestClampAction:
    def test_clamps(self, spec2):
        a = clamp_action([-0.5, 1.7], spec2)
        assert a.thresholds == (0.0, 1.0)

    def test_interior_untouched(self, spec2):
        a = clamp_action(np.array([0.25, 0.75]), spec2)
        assert a.thresholds == (0.25, 0.75)

    def test_length_checked(self, spec2):
        with pytest.raises(DimensionError):
            clamp_action([0.5], spec2)

    def test_non_finite_rejected(self, spec2):
        with pytest.raises(ValidationError):
            clamp_action([float("inf"), 0.5], spec2)

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=2, max_size=2))
    def test_always_in_unit_box(self, raw):
        a = clamp_action(raw, GroupSpec.uniform(2))
        assert all(0.0 <= t <= 1.0 for t in a.thresholds)


class TestSeedRng:
    def test_reproducible(self):
        a = seed_rng(7, "stream").uniform(size=5)
        b = seed_rng(7, "stream").uniform(size=5)
        np.testing.assert_array_equal(a, b)

    def test_labels_independent(self):
        a = seed_rng(7, "one").uniform(size=5)
        b = seed_rng(7, "two").uniform(size=5)
        assert not np.array_equal(a, b)

    def test_seed_matters(self):
        a = seed_rng(1, "s").uniform(size=5)
        b = seed_rng(2, "s").uniform(size=5)
        assert not np.array_equal(a, b)

    def test_requires_int(self):
        with pytest.raises(ValidationError):
            seed_rng("7", "s")


class TestHashing:
    def test_canonical_encoding(self):
        assert json_dumps({"b": 1, "a": [1.5, 2]}) == '{"a":[1.5,2],"b":1}'

    def test_stable_hash_key_order_invariant(self):
        assert stable_hash({"a": 1, "b": 2}) == stable_hash({"b": 2, "a": 1})

    def test_stable_hash_value_sensitive(self):
        assert stable_hash({"a": 1}) != stable_hash({"a": 2})


class TestEpisodeRecord:
    def test_sums(self):
        state, action = PopulationState((0.5, 0.5)), ThresholdAction((0.5, 0.5))
        steps = [StepRecord.from_metrics(state, action, 0.25, 0.5) for _ in range(4)]
        rec = EpisodeRecord.from_steps(steps, meta={"k": 1})
        assert len(rec) == 4
        assert rec.total_reward == pytest.approx(3.0)
        assert rec.total_utility == pytest.approx(2.0)
        assert rec.meta == {"k": 1}
