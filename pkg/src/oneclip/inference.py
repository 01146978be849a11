"""Rendering from an adapted generator: style mixing, external latents, edits, grids.

Latent files are a small binary container::

    magic  b"OCLA"
    u16    version (1)
    u8     kind (0 = W, 1 = W+)
    u16    rows per code (1 for W, L for W+)
    u16    latent dimension d
    f32[]  little-endian payload, row-major, any number of codes
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .core_types import ArgumentError, LatentCode, LatentKind, ParseError, RandomSource, ShapeError
from .generator import mean_latent, style_mix, synthesize

MAGIC = b"OCLA"
LATENT_VERSION = 1
_HEADER = struct.Struct("<4sHBHH")

MIX_MODES = ("none", "mean_replace", "ref_replace")


@dataclass(frozen=True)
class MixingPolicy:
    mode: str = "none"
    k: int = 0

    def __post_init__(self):
        if self.mode not in MIX_MODES:
            raise ArgumentError(f"mixing mode must be one of {MIX_MODES}")
        if self.k < 0:
            raise ArgumentError("k must be non-negative")


def mix_codes(
    gen,
    codes: LatentCode,
    policy: MixingPolicy,
    w_ref: LatentCode | None = None,
    replacement: LatentCode | None = None,
    rng: RandomSource | None = None,
) -> LatentCode:
    """Apply ``policy`` to ``codes`` and return a batched W+ code."""
    ws = codes.broadcast(gen.layer_count)
    if policy.mode == "none":
        return ws
    if policy.k > gen.layer_count:
        raise ArgumentError(f"k={policy.k} exceeds the generator's {gen.layer_count} layers")
    if replacement is None:
        if policy.mode == "mean_replace":
            replacement = mean_latent(gen, rng=rng or RandomSource(0, 0x3E))
        else:
            if w_ref is None:
                raise ArgumentError("ref_replace mixing needs the reference latent")
            replacement = w_ref
    rep = replacement.data.reshape(-1)
    return style_mix(ws, LatentCode.w(rep), policy.k)


def generate(gen, codes: LatentCode, policy: MixingPolicy = MixingPolicy(), **mix_kwargs) -> torch.Tensor:
    """Render ``codes``; mean_replace uses ``gen``'s own mean latent unless one is supplied."""
    with torch.no_grad():
        if policy.mode == "none":
            return synthesize(gen, codes)
        return synthesize(gen, mix_codes(gen, codes, policy, **mix_kwargs))


def edit_and_generate(gen, code: LatentCode, offset: LatentCode, policy: MixingPolicy = MixingPolicy(), **mix_kwargs):
    """Render ``code + offset``; offsets come from an external editing method."""
    return generate(gen, code + offset, policy, **mix_kwargs)


def generate_from_external(gen, latent_file: str | os.PathLike, policy: MixingPolicy = MixingPolicy(), **mix_kwargs):
    """Render every code stored in ``latent_file``."""
    codes = read_latents(latent_file)
    return generate(gen, LatentCode(codes.kind, codes.data.to(next(gen.parameters()).dtype)), policy, **mix_kwargs)


def write_latents(path: str | os.PathLike, code: LatentCode) -> None:
    batch = code.as_batch().data.detach().cpu()
    rows = 1 if code.kind == LatentKind.W else batch.shape[1]
    d = batch.shape[-1]
    payload = batch.to(torch.float32).numpy().astype("<f4", copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, LATENT_VERSION, int(code.kind), rows, d))
        f.write(payload)


def read_latents(path: str | os.PathLike) -> LatentCode:
    """Parse a latent file into one batched code."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, version, kind, rows, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != LATENT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if kind not in (0, 1):
        raise ParseError(f"{path}: unknown latent kind {kind}")
    if rows < 1 or d < 1 or (kind == 0 and rows != 1):
        raise ParseError(f"{path}: bad shape rows={rows} d={d}")
    body = raw[_HEADER.size :]
    per_code = rows * d * 4
    if not body or len(body) % per_code:
        raise ParseError(f"{path}: payload of {len(body)} bytes is not a whole number of codes")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)
    n = len(body) // per_code
    tensor = torch.from_numpy(data.copy())
    if not torch.isfinite(tensor).all():
        raise ParseError(f"{path}: non-finite values")
    if kind == 0:
        return LatentCode.w(tensor.view(n, d))
    return LatentCode.wplus(tensor.view(n, rows, d))


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] to [0, 255] with round-half-even; returns (n, H, W, 3)."""
    x = images.detach().cpu().double().clamp(-1, 1)
    x = np.rint((x.numpy() + 1.0) * 127.5)
    return x.clip(0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


def save_png(image: torch.Tensor, path: str | os.PathLike) -> None:
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ShapeError("save_png writes one image at a time")
        image = image[0]
    Image.fromarray(to_uint8(image[None])[0]).save(path, format="PNG")


def load_png(path: str | os.PathLike, resolution: int | None = None) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float64) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)[None].float()


def assemble_grid(images: list[torch.Tensor] | torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Row-major tiling into one (1, 3, rows*H, cols*W) image; empty cells are black."""
    if isinstance(images, torch.Tensor):
        images = list(images.split(1))
    tiles = torch.cat([im if im.ndim == 4 else im[None] for im in images]) if images else None
    if tiles is None or rows < 1 or cols < 1:
        raise ArgumentError("need at least one image and a positive grid size")
    if rows * cols < tiles.shape[0]:
        raise ArgumentError(f"{tiles.shape[0]} images do not fit a {rows}x{cols} grid")
    _, c, h, w = tiles.shape
    grid = torch.full((1, c, rows * h, cols * w), -1.0, dtype=tiles.dtype)
    for idx, tile in enumerate(tiles):
        r, q = divmod(idx, cols)
        grid[0, :, r * h : (r + 1) * h, q * w : (q + 1) * w] = tile
    return grid
