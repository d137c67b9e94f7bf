"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class SchemaError(ContractError):
    """A data file does not match its declared record format."""


class CorruptionError(RuntimeError):
    """A stored artifact is truncated or fails its integrity check."""
