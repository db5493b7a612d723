"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``tsdfcodec.cli``).
"""


class TsdfCodecError(Exception):
    """Base class for package errors."""


class FormatError(TsdfCodecError, ValueError):
    """Malformed or unrecognised file content."""


class ConfigError(TsdfCodecError, ValueError):
    """Inconsistent configuration, e.g. codec and volume truncation differ."""


class CodecError(TsdfCodecError, ValueError):
    """Code vector does not fit the codec (length or family mismatch)."""


class UnsupportedComparison(CodecError):
    """Descriptor comparison between code families that have no common prefix."""


class TrackingFailure(TsdfCodecError, RuntimeError):
    """Too few usable points to estimate a camera pose."""


class TrainingDiverged(TsdfCodecError, RuntimeError):
    """Loss became non-finite during training."""


class EvaluationError(TsdfCodecError, ValueError):
    """Nothing to evaluate, e.g. no associable poses."""


class AssociationError(TsdfCodecError, LookupError):
    """No pose close enough in time to the query timestamp."""
