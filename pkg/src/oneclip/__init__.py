"""One-shot adaptation of style-based generators guided by CLIP-space losses."""

from .core_types import (
    ArgumentError,
    BackendError,
    BoundsError,
    LatentCode,
    LatentKind,
    LengthMismatchError,
    NonFiniteError,
    OneClipError,
    ParseError,
    RandomSource,
    RangeError,
    ShapeError,
    UnsupportedError,
    VersionError,
)
from .embedding import FakeEmbedder, PatchSpec, clip_distance, cosine_similarity, make_embedder
from .generator import (
    Discriminator,
    StyleGenerator,
    build_discriminator,
    build_generator,
    mean_latent,
    sample_w,
    style_mix,
    synthesize,
)
from .inference import MixingPolicy, generate, read_latents, write_latents
from .latent_search import SearchConfig, SearchResult, invert_image, invert_text
from .losses import LossWeights
from .presets import PRESETS, DatasetPreset, get_preset
from .trainer import AdaptationConfig, Trainer, TrainState, adapt, adapt_text, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig",
    "ArgumentError",
    "BackendError",
    "BoundsError",
    "DatasetPreset",
    "Discriminator",
    "FakeEmbedder",
    "LatentCode",
    "LatentKind",
    "LengthMismatchError",
    "LossWeights",
    "MixingPolicy",
    "NonFiniteError",
    "OneClipError",
    "PRESETS",
    "ParseError",
    "PatchSpec",
    "RandomSource",
    "RangeError",
    "SearchConfig",
    "SearchResult",
    "ShapeError",
    "StyleGenerator",
    "TrainState",
    "Trainer",
    "UnsupportedError",
    "VersionError",
    "adapt",
    "adapt_text",
    "build_discriminator",
    "build_generator",
    "clip_distance",
    "cosine_similarity",
    "generate",
    "get_preset",
    "invert_image",
    "invert_text",
    "load_checkpoint",
    "make_embedder",
    "mean_latent",
    "read_latents",
    "sample_w",
    "save_checkpoint",
    "style_mix",
    "synthesize",
    "write_latents",
]
