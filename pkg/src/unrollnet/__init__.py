"""Recurrent conv-net graphs compiled to unrolled feedforward DAGs.

The package models a cyclic multi-state network (states joined by
time-windowed convolutional transitions), unrolls it to a readout
horizon under input-population semantics, and trains the result with
tied-gradient weight sharing and time-specific batch normalization.
A residual network is the one-state special case, and the dynamics
module carries the matching linear-systems analysis tools.
"""

from .graph import (
    ConfigError,
    GraphSpec,
    IOSchedule,
    SharingSpec,
    StateSpec,
    TransitionSpec,
    intermediate_feature_size,
    parse_config,
    serialize_config,
    validate,
)
from .presets import PRESET_NAMES, preset
from .store import ParamStore
from .unroll import (
    MissingStats,
    UnreachableReadout,
    UnrolledGraph,
    backward,
    forward,
    param_count,
    unroll,
    wall_clock_estimate,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GraphSpec",
    "IOSchedule",
    "MissingStats",
    "ParamStore",
    "PRESET_NAMES",
    "SharingSpec",
    "StateSpec",
    "TransitionSpec",
    "UnreachableReadout",
    "UnrolledGraph",
    "backward",
    "forward",
    "intermediate_feature_size",
    "param_count",
    "parse_config",
    "preset",
    "serialize_config",
    "unroll",
    "validate",
    "wall_clock_estimate",
    "__version__",
]
