import numpy as np
import pytest

from fairdyn.core import GroupSpec, PopulationState, ThresholdAction, seed_rng
from fairdyn.env import FairnessEnv


@pytest.fixture
def spec2():
    return GroupSpec.uniform(2)


@pytest.fixture
def env_dp(spec2):
    return FairnessEnv(spec2, horizon=10)


def random_state(rng: np.random.Generator) -> PopulationState:
    return PopulationState(tuple(rng.uniform(0.02, 0.98, size=2).tolist()))


def random_action(rng: np.random.Generator) -> ThresholdAction:
    return ThresholdAction(tuple(rng.uniform(0.0, 1.0, size=2).tolist()))


@pytest.fixture
def rng():
    return seed_rng(0, "tests")
