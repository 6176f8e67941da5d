"""Target-domain pseudo-label diffusion for self-training segmentation."""

from .core import (
    ConfidenceMap,
    FeatureMap,
    FlowField,
    LabelMap,
    ProbMap,
    argmax_channel,
    argmax_labels,
    cosine_similarity,
)
from .errors import ConfigError, FormatError, TdoDifError

__version__ = "0.1.0"

__all__ = [
    "ConfidenceMap",
    "ConfigError",
    "FeatureMap",
    "FlowField",
    "FormatError",
    "LabelMap",
    "ProbMap",
    "TdoDifError",
    "argmax_channel",
    "argmax_labels",
    "cosine_similarity",
]
