"""Multimodal knowledge-graph fusion with expert-choice routing for drug-drug interaction events."""

from .errors import (AimFuseError, ConfigError, DomainError, LeakageError, NumericError, ParseError,
                     ShapeError)

__version__ = "0.1.0"

__all__ = ["AimFuseError", "ConfigError", "DomainError", "LeakageError", "NumericError", "ParseError",
           "ShapeError", "__version__"]
