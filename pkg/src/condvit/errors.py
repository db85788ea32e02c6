"""Exception types shared across the package.

The CLI maps these onto exit codes: :class:`DataError` and its subclasses
exit with 3, :class:`NumericFailure` with 4, everything argument-shaped
with 2.
"""

from condvit.autodiff import DimensionError, GraphError, NumericError


class DataError(Exception):
    """Input files or records violate their documented format."""


class ManifestError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DecodeError(DataError):
    """An image file could not be decoded."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or from another format version."""


class StoreError(DataError):
    """Embedding store or condition-vector file is malformed."""


class ProtocolError(Exception):
    """The benchmark protocol's preconditions are violated."""


class CapacityError(ProtocolError):
    """A distractor level asks for more items than the pool holds."""


class IndexStateError(RuntimeError):
    """Search on an index that holds no items."""


class ConfigError(ValueError):
    """Configuration values are inconsistent."""


class NumericFailure(ArithmeticError):
    """Training diverged (non-finite loss)."""


__all__ = [
    "CapacityError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DecodeError",
    "DimensionError",
    "GraphError",
    "IndexStateError",
    "ManifestError",
    "NumericError",
    "NumericFailure",
    "ProtocolError",
    "StoreError",
]
