"""Exception hierarchy shared by every stage."""


class MarkNerfError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MarkNerfError, ValueError):
    """Input data violates a shape, range, or geometric invariant."""


class ImageDecodeError(MarkNerfError, ValueError):
    """A file exists but does not decode as an image."""


class ConfigurationError(MarkNerfError, ValueError):
    """A configuration value is missing, out of range, or inconsistent."""


class TrainingError(MarkNerfError, RuntimeError):
    """Optimization diverged (non-finite loss)."""

    def __init__(self, stage: str, step: int, message: str = "non-finite loss"):
        self.stage = stage
        self.step = step
        super().__init__(f"{stage}: {message} at step {step}")


class NumericError(MarkNerfError, ArithmeticError):
    """A network produced non-finite values while rendering."""


class TamperError(MarkNerfError):
    """An artifact does not match the hash recorded in the key file."""
