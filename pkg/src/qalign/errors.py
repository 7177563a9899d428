"""Exception hierarchy shared by all qalign modules.

Every data-level failure raises a subclass of :class:`QAlignError` so the
CLI can map them uniformly to exit code 2. Usage problems (bad flags) use
:class:`UsageError` and map to exit code 1.
"""


class QAlignError(Exception):
    """Base class for all data-level errors raised by this package."""


class UsageError(QAlignError):
    """Command line was not parseable or flags were inconsistent."""


# --- tensor file format -----------------------------------------------------

class TensorFormatError(QAlignError):
    """A tensor file violates the binary layout."""


class BadMagic(TensorFormatError):
    pass


class UnsupportedVersion(TensorFormatError):
    pass


class UnsupportedDtype(TensorFormatError):
    pass


class UnsupportedFlags(TensorFormatError):
    pass


class UnsupportedRank(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


class NonFiniteValue(QAlignError):
    """A matrix contains NaN or infinity."""


class IoFailure(QAlignError):
    """An underlying filesystem operation failed."""


# --- shape / index contracts ------------------------------------------------

class ShapeMismatch(QAlignError):
    pass


class BadDimensions(QAlignError):
    """Dimensions violate a generator or matrix precondition."""


class KOutOfRange(QAlignError):
    pass


class NonSquare(QAlignError):
    """Aggregation requires equal appearance and structure counts."""


class WrongStage(QAlignError):
    """An aggregation matrix was passed at the wrong pipeline stage."""


class EmptyRow(QAlignError):
    """A row with no support reached reweighting; fallback was skipped."""


class DegenerateRow(QAlignError):
    """A contrast-adjusted row collapsed to all zeros."""


class IndexOutOfRange(QAlignError):
    pass


class EmptySelection(QAlignError):
    pass


class NoGrid(QAlignError):
    """A spatial operation needs a grid the matrix does not carry."""


class GridMismatch(QAlignError):
    pass


class EmptyUnion(QAlignError):
    """IoU is undefined when both masks are empty."""


class EmptyList(QAlignError):
    pass


class NotBinaryMask(QAlignError):
    """Mask data contains values other than 0 and 1."""
