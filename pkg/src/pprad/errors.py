"""Exception hierarchy shared by every subsystem.

``ConfigError`` and ``ValidationError`` are the user-fixable class; the CLI
maps them to exit code 2, everything else to 1.
"""


class PPRError(Exception):
    """Base class for all package errors."""


class ConfigError(PPRError, ValueError):
    """Invalid configuration or argument combination."""


class ValidationError(ConfigError):
    """Input data violates a precondition (e.g. anomalous training volume)."""


class ShapeError(PPRError, ValueError):
    """Tensor or volume shapes are incompatible."""


class CoordRangeError(PPRError, IndexError):
    """A voxel index lies outside its volume."""


class FormatError(PPRError):
    """A binary file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(PPRError):
    """The phantom generator could not satisfy its configuration."""


class SamplingError(PPRError):
    """Patch sampling exhausted its attempt budget."""


class NumericError(PPRError, ArithmeticError):
    """Non-finite values appeared during optimisation."""


class StateError(PPRError, RuntimeError):
    """An operation was invoked in the wrong state (e.g. backward before forward)."""


class EvaluationError(PPRError, ValueError):
    """Evaluation inputs are degenerate (single class, empty mask, ...)."""
