"""Desk-scale lab for stochastic positional embeddings in masked image modeling."""
from .config import RunConfig
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InternalError,
    StopLabError,
    TrainingDiverged,
    UsageError,
)
from .estimators import LinearProbe, StoPPretrainer

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "StoPPretrainer",
    "LinearProbe",
    "StopLabError",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "InternalError",
    "TrainingDiverged",
    "UsageError",
]
