"""Error hierarchy for the SilentWear pipeline.

Every error belongs to one of three categories, each mapped to a CLI exit code:
usage problems (2), bad input data (3) and internal/numeric failures (4).
"""


class SilentWearError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 4


class UsageError(SilentWearError):
    """Invalid invocation, configuration or parameter value."""

    exit_code = 2


class DataError(SilentWearError):
    """Input files or datasets that violate the expected structure."""

    exit_code = 3


class InternalError(SilentWearError):
    """Numeric or shape failure inside the pipeline."""

    exit_code = 4


# Usage errors

class ConfigError(UsageError):
    pass


class InvalidConfig(UsageError):
    pass


class InvalidCutoff(UsageError):
    pass


class InvalidCenter(UsageError):
    pass


class DomainError(UsageError):
    pass


class LabelOutOfRange(UsageError):
    pass


# Data errors

class BadMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class EventOutOfRange(DataError):
    pass


class SegmentTooShort(DataError):
    pass


class InsufficientRest(DataError):
    pass


class InvalidSpec(DataError):
    pass


class IncompleteManifest(DataError):
    pass


class ClassUnderflow(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ChannelMismatch(DataError):
    pass


class SampleRateMismatch(DataError):
    pass


class SourceUnderrun(DataError):
    pass


class EmptyCalibrationSet(DataError):
    pass


class UnpopulatedStats(DataError):
    pass


class VersionMismatch(DataError):
    pass


class Corrupt(DataError):
    pass


class EmptyInput(DataError):
    pass


class MissingClass(DataError):
    pass


# Internal errors

class ShapeMismatch(InternalError):
    pass


class SignalTooShort(InternalError):
    pass


class GraphNotRecorded(InternalError):
    pass


class WindowTooShort(InternalError):
    pass


class UnstableFilter(InternalError):
    pass
