"""Learned block codecs for truncated signed distance field maps."""
from .errors import (AssociationError, CodecError, ConfigError, EvaluationError, FormatError, TrackingFailure,
                     TrainingDiverged, TsdfCodecError, UnsupportedComparison)
from .volume import BLOCK_EDGE, BLOCK_SIZE, D_MAX, D_MIN, TsdfVolume

__all__ = [
    "AssociationError", "CodecError", "ConfigError", "EvaluationError", "FormatError", "TrackingFailure",
    "TrainingDiverged", "TsdfCodecError", "UnsupportedComparison",
    "BLOCK_EDGE", "BLOCK_SIZE", "D_MAX", "D_MIN", "TsdfVolume",
]
