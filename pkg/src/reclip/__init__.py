"""Bias-rectified CLIP segmentation: learnable class/space bias extraction and contrastive training."""

from .core import IGNORE, ClassVocabulary, ImageRecord, PatchGrid, RunConfig

__all__ = ["IGNORE", "ClassVocabulary", "ImageRecord", "PatchGrid", "RunConfig"]
__version__ = "0.1.0"
