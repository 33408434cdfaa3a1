"""Desk-scale unified token-based multimodal generation pipeline."""

from .config import (
    FinetuneConfig,
    ModelConfig,
    PretrainConfig,
    RunConfig,
    SamplingParams,
    VqConfig,
)
from .vocab import (
    ByteTokenizer,
    ImageSegment,
    MultimodalDocument,
    TextSegment,
    VocabLayout,
)
from .vq import Codebook, VqTokenizer

__version__ = "0.1.0"

__all__ = [
    "ByteTokenizer",
    "Codebook",
    "FinetuneConfig",
    "ImageSegment",
    "ModelConfig",
    "MultimodalDocument",
    "PretrainConfig",
    "RunConfig",
    "SamplingParams",
    "TextSegment",
    "VocabLayout",
    "VqConfig",
    "VqTokenizer",
    "__version__",
]
