"""Core modules: errors, seeded substreams and run configuration."""

from .errors import (
    ConfigError,
    InsufficientSamples,
    InvalidInput,
    NothingRemains,
    OverBudget,
    StateError,
    UntwinError,
)
from .rng import derive_key, substream

__all__ = [
    "ConfigError",
    "InsufficientSamples",
    "InvalidInput",
    "NothingRemains",
    "OverBudget",
    "StateError",
    "UntwinError",
    "derive_key",
    "substream",
]
