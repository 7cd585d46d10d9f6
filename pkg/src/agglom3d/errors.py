"""Exception types shared across the package.

The CLI maps each family onto its own exit status, so callers can tell a bad
config from a broken file from a violated precondition.
"""


class Agglom3DError(Exception):
    """Base class for all package errors."""


class ValidationError(Agglom3DError, ValueError):
    """An input value violates a documented invariant."""


class ContractError(Agglom3DError, ValueError):
    """An operation was called outside its precondition."""


class CapacityError(ContractError):
    """A constrained random construction could not be satisfied."""


class ConfigError(Agglom3DError):
    """A run configuration is malformed. ``key_path`` names the offending key."""

    def __init__(self, message: str, key_path: str = ""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class FormatError(Agglom3DError):
    """A binary artifact could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DimensionError(FormatError, ValidationError):
    """A parsed artifact has a dimension other than the one declared."""


class NonFiniteError(Agglom3DError, FloatingPointError):
    """A loss or parameter became NaN or infinite during training."""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")
