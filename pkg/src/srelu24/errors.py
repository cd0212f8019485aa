"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class PrecisionError(ValueError):
    """Operands mix working (float32) and oracle (float64) precision."""


class OrientationError(ValueError):
    """A compressed operand has the wrong orientation for this kernel."""


class MaskError(ValueError):
    """A keep/drop mask violates the structure the operation requires."""


class FormatError(ValueError):
    """A matrix file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(ValueError):
    """NaN or Inf where only finite values are admitted."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Unusable input data (e.g. empty corpus)."""


class StateError(RuntimeError):
    """Cached forward state does not match the backward call."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient. Carries the step."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"training diverged at step {step}")
        self.step = step
