"""Exception hierarchy shared by all seqsort modules."""


class SeqSortError(Exception):
    """Base class for every error raised by this package."""


# DICOM ingestion
class MalformedStream(SeqSortError):
    pass


class UnsupportedTransferSyntax(SeqSortError):
    pass


class MissingMandatoryAttribute(SeqSortError):
    pass


class PixelDecodeFailure(SeqSortError):
    pass


class EmptyInput(SeqSortError):
    pass


# dataset
class InsufficientStudies(SeqSortError):
    pass


class InsufficientStudiesWarning(UserWarning):
    """A stratum had too few studies to split and went wholly to train."""


class EmptySplit(SeqSortError):
    pass


# network kernel
class ShapeMismatch(SeqSortError, ValueError):
    pass


class OddSpatialDim(SeqSortError, ValueError):
    pass


class BatchTooSmall(SeqSortError, ValueError):
    pass


class IndexOutOfRange(SeqSortError, IndexError):
    pass


class InvalidClass(SeqSortError, ValueError):
    pass


# persistence
class CheckpointIOFailure(SeqSortError):
    pass


class CorruptCheckpoint(SeqSortError):
    pass


class VersionMismatch(SeqSortError):
    pass


class ConfigError(SeqSortError):
    pass
