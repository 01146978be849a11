"""Semantic embedders, cosine geometry and patch cropping."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core_types import (
    ArgumentError,
    BackendError,
    BoundsError,
    RandomSource,
    UnsupportedError,
    as_generator,
)

CACHE_ENV = "ONECLIP_CACHE"


def resize(images: torch.Tensor, resolution: int) -> torch.Tensor:
    if images.shape[-1] == resolution and images.shape[-2] == resolution:
        return images
    return F.interpolate(images, size=(resolution, resolution), mode="bilinear", align_corners=False)


def normalize(x: torch.Tensor) -> torch.Tensor:
    return x / torch.linalg.vector_norm(x, dim=-1, keepdim=True)


class Embedder:
    """Maps images (and optionally text) to unit-norm vectors.

    Subclasses implement ``_embed_images`` on images already resized to
    ``input_resolution``; gradients flow through image embedding.
    """

    name = "base"
    output_dim: int
    input_resolution: int
    supports_text = False

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ArgumentError(f"expected (n, 3, H, W) images, got {tuple(images.shape)}")
        return normalize(self._embed_images(resize(images, self.input_resolution)))

    def embed_text(self, text: str) -> torch.Tensor:
        if not self.supports_text:
            raise UnsupportedError(f"embedder {self.name!r} has no text encoder")
        if not text:
            raise ArgumentError("text prompt must be non-empty")
        return normalize(self._embed_text(text))

    def _embed_images(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _embed_text(self, text: str) -> torch.Tensor:
        raise NotImplementedError


class FakeEmbedder(Embedder):
    """Seeded linear projection of the resized, flattened image.

    Text is mapped to a fixed pseudo-random direction derived from the hash
    of the string, so prompts are deterministic but carry no meaning.
    """

    name = "fake"
    supports_text = True

    def __init__(self, seed: int = 0, output_dim: int = 64, input_resolution: int = 32):
        self.seed = seed
        self.output_dim = output_dim
        self.input_resolution = input_resolution
        g = RandomSource(seed, stream=0x0E).generator()
        in_dim = 3 * input_resolution * input_resolution
        self.projection = torch.randn(output_dim, in_dim, generator=g, dtype=torch.float64)
        self.projection /= in_dim**0.5

    def _embed_images(self, images):
        proj = self.projection.to(images.dtype)
        return images.flatten(1) @ proj.T

    def _embed_text(self, text):
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1))
        return torch.randn(self.output_dim, generator=g, dtype=torch.float64)


class ClipEmbedder(Embedder):
    """Pre-trained CLIP through ``transformers``; weights come from a local path or the cache."""

    name = "clip"
    supports_text = True
    _mean = (0.48145466, 0.4578275, 0.40821073)
    _std = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            from transformers import CLIPModel, CLIPTokenizer

            cache = os.environ.get(CACHE_ENV)
            self.model = CLIPModel.from_pretrained(model, cache_dir=cache).eval().to(device)
            self.tokenizer = CLIPTokenizer.from_pretrained(model, cache_dir=cache)
        except Exception as exc:  # noqa: BLE001 - any loader failure is a backend failure
            raise BackendError(f"could not load CLIP model {model!r}: {exc}") from exc
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.device = device
        self.input_resolution = self.model.config.vision_config.image_size
        self.output_dim = self.model.config.projection_dim

    def _embed_images(self, images):
        x = (images + 1) / 2
        mean = torch.tensor(self._mean, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self._std, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        x = ((x - mean) / std).to(self.device, torch.float32)
        return self.model.get_image_features(pixel_values=x).to(images.dtype)

    def _embed_text(self, text):
        tokens = self.tokenizer([text], padding=True, return_tensors="pt").to(self.device)
        with torch.no_grad():
            return self.model.get_text_features(**tokens)[0].double()


def make_embedder(name: str, path: str | None = None, seed: int = 0, **kwargs) -> Embedder:
    if name == "fake":
        return FakeEmbedder(seed=seed, **kwargs)
    if name == "clip":
        return ClipEmbedder(path or "openai/clip-vit-base-patch32")
    raise BackendError(f"unknown embedder backend {name!r}")


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Dot product of unit vectors along the last axis."""
    return (a * b).sum(-1)


def clip_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine distance ``1 - cos`` in [0, 2]."""
    return 1 - cosine_similarity(a, b)


@dataclass(frozen=True)
class PatchSpec:
    """Square patch size plus crop locations; index 0 is the anchor, the rest are negatives."""

    size: int
    locations: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    @property
    def count(self) -> int:
        return len(self.locations) - 1


def crop_patches(images: torch.Tensor, spec: PatchSpec) -> torch.Tensor:
    """Crop every location from every image, location-major: row ``k*B + b``."""
    h, w = images.shape[-2:]
    s = spec.size
    if s < 1:
        raise ArgumentError("patch size must be positive")
    crops = []
    for top, left in spec.locations:
        if top < 0 or left < 0 or top + s > h or left + s > w:
            raise BoundsError(f"patch at ({top}, {left}) of size {s} leaves a {h}x{w} image")
        crops.append(images[:, :, top : top + s, left : left + s])
    return torch.cat(crops, dim=0)


def sample_patch_locations(
    rng: RandomSource | torch.Generator, image_size: int, patch_size: int, count: int
) -> list[tuple[int, int]]:
    """Draw ``count + 1`` uniform in-bounds offsets (anchor first)."""
    if patch_size > image_size or patch_size < 1:
        raise ArgumentError(f"patch size {patch_size} does not fit a {image_size}px image")
    if count < 1:
        raise ArgumentError("need at least one negative location")
    hi = image_size - patch_size + 1
    offsets = torch.randint(0, hi, (count + 1, 2), generator=as_generator(rng))
    return [(int(t), int(l)) for t, l in offsets.tolist()]
