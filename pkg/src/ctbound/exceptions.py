"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
bad inputs with 3 and numeric failures with 4.
"""


class CTBoundError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(CTBoundError, ValueError):
    """A numeric parameter is outside its valid domain (e.g. ``eps <= 0``)."""


class ConfigurationError(CTBoundError, ValueError):
    """Inconsistent or unknown configuration, missing checkpoint, bad model setup."""


class InputError(CTBoundError, ValueError):
    """Input data has the wrong shape, range or content."""


class DimensionError(InputError):
    """Tensor shapes are incompatible for an operation."""


class ImageIOError(CTBoundError, OSError):
    """An image or checkpoint file could not be read or decoded."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class NumericError(CTBoundError, ArithmeticError):
    """Non-finite values appeared during training or inference."""


class TrainingError(NumericError):
    """Training diverged; ``param_name`` names the offending parameter if known."""

    def __init__(self, message, param_name=None):
        self.param_name = param_name
        super().__init__(message)
