"""Multi-source prompt distillation: Python front end to the C++ core."""

from ._core import *  # noqa: F401,F403
from ._core import (
    ConfigError,
    CorruptionError,
    Error,
    InvalidInput,
    LookupError,
    MissingInput,
    NumericalError,
    StateError,
    ValidationError,
)

__all__ = [name for name in dir() if not name.startswith("_")]
