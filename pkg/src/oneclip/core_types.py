"""Shared value types, seeded randomness and validation helpers."""

from __future__ import annotations

import enum
import hashlib
import itertools
from dataclasses import dataclass

import torch


class OneClipError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(OneClipError, ValueError):
    pass


class RangeError(OneClipError, ValueError):
    pass


class ShapeError(OneClipError, ValueError):
    pass


class BoundsError(OneClipError, IndexError):
    pass


class LengthMismatchError(OneClipError, ValueError):
    pass


class BackendError(OneClipError, RuntimeError):
    pass


class UnsupportedError(OneClipError, NotImplementedError):
    pass


class NonFiniteError(OneClipError, FloatingPointError):
    pass


class ParseError(OneClipError, ValueError):
    pass


class VersionError(OneClipError, ValueError):
    pass


class LatentKind(enum.IntEnum):
    W = 0
    WPLUS = 1


@dataclass(frozen=True)
class LatentCode:
    """A point in style space: one vector (W) or a per-layer stack (W+).

    ``data`` may carry a leading batch axis, so a W code has shape ``(d,)`` or
    ``(n, d)`` and a W+ code ``(L, d)`` or ``(n, L, d)``.
    """

    kind: LatentKind
    data: torch.Tensor

    def __post_init__(self):
        expected = (1, 2) if self.kind == LatentKind.W else (2, 3)
        if self.data.ndim not in expected:
            raise ShapeError(f"{self.kind.name} code with shape {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise RangeError("latent code contains non-finite values")

    @classmethod
    def w(cls, data: torch.Tensor) -> "LatentCode":
        return cls(LatentKind.W, data)

    @classmethod
    def wplus(cls, data: torch.Tensor) -> "LatentCode":
        return cls(LatentKind.WPLUS, data)

    @property
    def batched(self) -> bool:
        return self.data.ndim == (2 if self.kind == LatentKind.W else 3)

    @property
    def dim(self) -> int:
        return self.data.shape[-1]

    def __len__(self) -> int:
        return self.data.shape[0] if self.batched else 1

    def as_batch(self) -> "LatentCode":
        return self if self.batched else LatentCode(self.kind, self.data.unsqueeze(0))

    def broadcast(self, layer_count: int) -> "LatentCode":
        """Return the equivalent batched W+ code with ``layer_count`` rows."""
        code = self.as_batch()
        if code.kind == LatentKind.WPLUS:
            if code.data.shape[1] != layer_count:
                raise ShapeError(
                    f"W+ code has {code.data.shape[1]} rows, generator expects {layer_count}"
                )
            return code
        return LatentCode.wplus(code.data.unsqueeze(1).expand(-1, layer_count, -1))

    def __add__(self, other: "LatentCode") -> "LatentCode":
        if self.kind == other.kind and self.data.shape == other.data.shape:
            return LatentCode(self.kind, self.data + other.data)
        if self.kind == LatentKind.WPLUS or other.kind == LatentKind.WPLUS:
            layers = (self if self.kind == LatentKind.WPLUS else other).data.shape[-2]
            a, b = self.broadcast(layers).data, other.broadcast(layers).data
            try:
                return LatentCode.wplus(a + b)
            except RuntimeError as exc:
                raise ShapeError(str(exc)) from exc
        try:
            return LatentCode.w(self.as_batch().data + other.as_batch().data)
        except RuntimeError as exc:
            raise ShapeError(str(exc)) from exc


@dataclass(frozen=True)
class RandomSource:
    """A reproducible random stream keyed by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def derived_seed(self) -> int:
        digest = hashlib.sha256(f"{self.seed}:{self.stream}".encode()).digest()
        return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF

    def generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.derived_seed())
        return g

    def child(self, stream: int) -> "RandomSource":
        return RandomSource(self.derived_seed(), stream)


def as_generator(rng: RandomSource | torch.Generator) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return rng.generator()


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def validate_image_batch(batch: torch.Tensor) -> None:
    """Raise unless ``batch`` is a finite (n, 3, H, W) tensor in [-1, 1] with power-of-two sides."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeError(f"expected (batch, 3, H, W), got {tuple(batch.shape)}")
    h, w = batch.shape[-2:]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"image sides must be powers of two, got {h}x{w}")
    if not torch.isfinite(batch).all():
        raise RangeError("image batch contains non-finite values")
    if batch.numel() and (batch.min() < -1 or batch.max() > 1):
        raise RangeError("image values must lie in [-1, 1]")


def pairwise_index(n_latents: int) -> list[tuple[int, int]]:
    """All unordered index pairs ``(i, j)`` with ``i < j``."""
    if n_latents < 2:
        raise ArgumentError(f"need at least 2 latents for pairs, got {n_latents}")
    return list(itertools.combinations(range(n_latents), 2))
