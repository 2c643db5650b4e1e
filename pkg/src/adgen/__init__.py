"""Domain-generalized textured-surface anomaly detection.

Multi-scale patch features are compared between a query image and normal
reference images by a co-attention module and an MLP meta-comparer trained
episodically across source domains.
"""

from .data import DomainDataset, Episode, ImageSample, SplitConfig, TextureSpec
from .features import ExtractorConfig
from .model import AnomalyModel, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "AnomalyModel",
    "DomainDataset",
    "Episode",
    "ExtractorConfig",
    "ImageSample",
    "ModelConfig",
    "SplitConfig",
    "TextureSpec",
    "TrainConfig",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
