"""fairdyn: long-horizon fairness dynamics as a constrained episodic MDP.

A population of agents reacts to a deployed classifier: qualification rates
evolve under replicator dynamics driven by how the classifier treats each
label. The package provides the population simulator, closed-form and
data-driven feature models, institution loss and group-disparity metrics, a
constrained LSVI-UCB learner over a Voronoi-discretized action space, a
myopic baseline, and a CLI harness with a JSON-lines wire protocol for
external agents.
"""

from fairdyn.core import (
    SCHEMA_VERSION,
    ConfigError,
    DimensionError,
    EpisodeConfig,
    FairdynError,
    GroupSpec,
    PopulationState,
    ResourceError,
    StepRecord,
    ThresholdAction,
    ValidationError,
    clamp_action,
    seed_rng,
)

__version__ = "0.1.0"

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "DimensionError",
    "EpisodeConfig",
    "FairdynError",
    "GroupSpec",
    "PopulationState",
    "ResourceError",
    "StepRecord",
    "ThresholdAction",
    "ValidationError",
    "clamp_action",
    "seed_rng",
    "__version__",
]
