"""Sponge-example (energy-latency) attacks and activation-density analysis for small CNNs."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
    SpecError,
    SpongeError,
    StateError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "ShapeError",
    "SpecError",
    "SpongeError",
    "StateError",
    "__version__",
]
