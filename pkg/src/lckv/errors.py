"""Exception types shared across the package."""


class LckvError(Exception):
    """Base class for all package errors."""


class ShapeError(LckvError):
    """Operand shapes or dtypes are incompatible with an operation."""


class ConfigError(LckvError):
    """A configuration value violates an invariant."""


class ContractError(LckvError):
    """A function was called in a way its contract forbids."""


class NumericError(LckvError):
    """A computation produced non-finite values."""


class ContextOverflowError(LckvError):
    """A token position exceeded the model context without streaming enabled."""


class CheckpointError(LckvError):
    """Checkpoint file is unreadable or inconsistent.

    `code` is one of "bad_magic", "truncated", "geometry_mismatch".
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
