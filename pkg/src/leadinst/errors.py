"""Exception hierarchy shared by all leadinst modules."""


class LeadInstError(Exception):
    """Base class for every error raised by leadinst."""


class ShapeError(LeadInstError, ValueError):
    pass


class ParameterError(LeadInstError, ValueError):
    pass


class LabelError(LeadInstError, ValueError):
    pass


class IndexLookupError(LeadInstError, IndexError):
    pass


class SilentAudioError(LeadInstError, ValueError):
    pass


class AudioFormatError(LeadInstError, ValueError):
    pass


class WavParseError(LeadInstError, ValueError):
    pass


class AlignmentError(LeadInstError, ValueError):
    pass


class ScheduleGapError(LeadInstError, ValueError):
    pass


class AnnotationError(LeadInstError, ValueError):
    pass


class EmptyTrackSetError(LeadInstError, ValueError):
    pass


class CorruptSampleError(LeadInstError, ValueError):
    pass


class MappingError(LeadInstError, KeyError):
    pass


class UndefinedMetricError(LeadInstError, ValueError):
    pass


class ConfigError(LeadInstError, ValueError):
    pass


class CheckpointError(LeadInstError, IOError):
    pass


class NumericError(LeadInstError, FloatingPointError):
    """Raised when a non-finite value reaches the optimizer."""
