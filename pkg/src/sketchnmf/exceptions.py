"""Exception hierarchy shared across the package."""


class SketchNMFError(Exception):
    """Base class for all errors raised by sketchnmf."""


class ShapeError(SketchNMFError, ValueError):
    """Operand dimensions do not conform."""


class InvalidConfigError(SketchNMFError, ValueError):
    """A run or cluster configuration is invalid."""


class InvalidSketchSizeError(InvalidConfigError):
    """Requested sketch dimension is outside ``1 <= d <= n``."""


class DegenerateInputError(SketchNMFError, ValueError):
    """Input is degenerate, e.g. a zero-norm data matrix."""


class NegativeEntryError(SketchNMFError, ValueError):
    """Input contains negative entries where nonnegativity is required."""


class BarrierTimeoutError(SketchNMFError, RuntimeError):
    """A collective was entered without every node's contribution."""


class ProtocolClosedError(SketchNMFError, RuntimeError):
    """A message was pushed to a channel that has been shut down."""


class ProtocolViolationError(SketchNMFError, ValueError):
    """A message does not satisfy the protocol's payload contract."""


class DataCorruptionError(SketchNMFError, ValueError):
    """Observed sketch pairs are mutually inconsistent."""


class MatrixMarketError(SketchNMFError, ValueError):
    """A Matrix Market file is malformed or violates the NMF input domain."""
