"""
Exception types for RefPaint.

Each error subclasses the builtin that callers would naturally catch
(ValueError for bad input, OSError for file problems, RuntimeError for
failures during a run), so ``except ValueError`` keeps working everywhere.
"""

from typing import Any, Dict, Optional


class RefPaintError(Exception):
    """Base mixin for every error raised by this package."""

    kind = "RefPaintError"


class ParameterError(RefPaintError, ValueError):
    """A numeric parameter is outside its documented range."""

    kind = "ParameterError"


class ShapeError(RefPaintError, ValueError):
    """Tensor shapes do not agree."""

    kind = "ShapeError"


class ConfigurationError(RefPaintError, ValueError):
    """A config document or checkpoint is missing something it must have."""

    kind = "ConfigurationError"


class DegenerateInputError(RefPaintError, ValueError):
    """Input is well-formed but empty where content is required (e.g. no hole)."""

    kind = "DegenerateInputError"


class MaskGenerationError(RefPaintError, RuntimeError):
    """Rejection sampling could not reach the requested hole coverage."""

    kind = "MaskGenerationError"


class CheckpointError(RefPaintError, OSError):
    """Reading or writing a checkpoint container failed."""

    kind = "CheckpointError"


class NonFiniteLossError(RefPaintError, RuntimeError):
    """
    Training produced a NaN or infinite loss.

    Attributes:
        state (dict): Diagnostic dump of the step (step index, timesteps,
            per-sample losses, parameter norms).
    """

    kind = "NonFiniteLossError"

    def __init__(self, message: str, state: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.state = dict(state or {})


class UsageError(RefPaintError, ValueError):
    """Command-line arguments could not be parsed."""

    kind = "UsageError"
