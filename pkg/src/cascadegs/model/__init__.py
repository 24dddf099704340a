from .blocks import PoseEmbed, PoseReadout, TokenGrid, Tokenizer, tap_indices
from .cascade import (
    CascadeModel,
    CascadeOutput,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .heads import (
    AppearanceDecoder,
    DenseDecoder,
    FrozenImagePyramid,
    GaussianHead,
    split_points_confidence,
)

__all__ = [
    "AppearanceDecoder",
    "CascadeModel",
    "CascadeOutput",
    "DenseDecoder",
    "FrozenImagePyramid",
    "GaussianHead",
    "ModelConfig",
    "PoseEmbed",
    "PoseReadout",
    "TokenGrid",
    "Tokenizer",
    "load_checkpoint",
    "save_checkpoint",
    "split_points_confidence",
    "tap_indices",
]
