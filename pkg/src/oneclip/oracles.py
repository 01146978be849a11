"""Independent oracles for tests: scalar brute force, finite differences, rigged and closed-form models.

Nothing in the training path imports this module.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import mpmath
import numpy as np
import torch
import torch.nn as nn

from .core_types import ArgumentError, NonFiniteError, RandomSource, RangeError, as_generator
from .embedding import Embedder, FakeEmbedder, normalize


def brute_force_patchnce(pos: float, negs: Sequence[float], dps: int = 50) -> float:
    """``-log(e^pos / (e^pos + sum e^neg))`` in ``dps``-digit arithmetic."""
    values = [pos, *negs]
    if any(not -1 <= v <= 1 for v in values):
        raise RangeError("dot products of unit vectors lie in [-1, 1]")
    with mpmath.workdps(dps):
        num = mpmath.exp(mpmath.mpf(pos))
        den = num + mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in negs)
        return float(-mpmath.log(num / den))


def fingerprint(image: torch.Tensor) -> str:
    """Hash of the exact bytes (plus dtype and shape) of one image."""
    arr = image.detach().cpu().contiguous().numpy()
    h = hashlib.sha256(f"{arr.dtype}{arr.shape}".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class RiggedEmbedder(Embedder):
    """Returns prescribed vectors for known images (by fingerprint), else a fake projection."""

    name = "rigged"
    supports_text = True

    def __init__(self, fallback: FakeEmbedder | None = None):
        self.fallback = fallback or FakeEmbedder()
        self.output_dim = self.fallback.output_dim
        self.input_resolution = self.fallback.input_resolution
        self.images: dict[str, torch.Tensor] = {}
        self.texts: dict[str, torch.Tensor] = {}

    def rig_image(self, image: torch.Tensor, vector) -> None:
        vec = torch.as_tensor(vector, dtype=torch.float64)
        if abs(float(torch.linalg.vector_norm(vec)) - 1) > 1e-12:
            raise ArgumentError("prescribed embeddings must be unit-norm")
        self.images[fingerprint(image)] = vec

    def rig_text(self, text: str, vector) -> None:
        self.texts[text] = normalize(torch.as_tensor(vector, dtype=torch.float64))

    def embed_image(self, images):
        out = []
        for img in images.split(1):
            key = fingerprint(img[0])
            if key in self.images:
                out.append(self.images[key].to(images.dtype)[None])
            else:
                out.append(self.fallback.embed_image(img))
        return torch.cat(out)

    def _embed_text(self, text):
        if text in self.texts:
            return self.texts[text]
        return self.fallback._embed_text(text)


def unit_vectors_with_dots(pos: float, negs: Sequence[float], dim: int):
    """Unit vectors ``v, v_pos, v_negs`` with ``v . v_pos = pos`` and ``v . v_negs[i] = negs[i]``."""
    if dim < len(negs) + 2:
        raise ArgumentError("dimension too small for independent directions")
    eye = np.eye(dim)
    v = eye[0]
    v_pos = pos * eye[0] + np.sqrt(max(0.0, 1 - pos * pos)) * eye[1]
    v_negs = [d * eye[0] + np.sqrt(max(0.0, 1 - d * d)) * eye[i + 2] for i, d in enumerate(negs)]
    return v, v_pos, v_negs


def sample_coordinates(params: Sequence[torch.Tensor], n: int, rng: RandomSource | torch.Generator):
    """Draw ``n`` distinct (param index, flat index) pairs, weighted by parameter size."""
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    picks = torch.randperm(total, generator=as_generator(rng))[: min(n, total)].tolist()
    offsets = np.cumsum([0, *sizes])
    coords = []
    for flat in sorted(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((k, flat - int(offsets[k])))
    return coords


def finite_diff_gradient(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
    coords: Sequence[tuple[int, int]] | None = None,
) -> torch.Tensor:
    """Central differences; the step for coordinate ``p`` is ``epsilon * max(1, |p|)``."""
    if epsilon <= 0:
        raise ArgumentError("epsilon must be positive")
    if coords is None:
        coords = [(k, i) for k, p in enumerate(params) for i in range(p.numel())]
    est = []
    with torch.no_grad():
        for k, i in coords:
            flat = params[k].view(-1)
            orig = flat[i].item()
            h = epsilon * max(1.0, abs(orig))
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"loss non-finite at coordinate {(k, i)}")
            est.append((up - down) / (2 * h))
    return torch.tensor(est, dtype=torch.float64)


def autodiff_gradient(loss_fn, params, coords) -> torch.Tensor:
    grads = torch.autograd.grad(loss_fn(), list(params), allow_unused=True)
    out = []
    for k, i in coords:
        g = grads[k]
        out.append(0.0 if g is None else g.reshape(-1)[i].item())
    return torch.tensor(out, dtype=torch.float64)


def gradient_check(loss_fn, params, n: int = 64, rng=RandomSource(0), epsilon: float = 1e-4):
    """Relative error ``|fd - ad| / max(|ad|, |fd|)`` over ``n`` sampled coordinates.

    Returns ``(relative_error, autodiff, finite_difference)``.
    """
    coords = sample_coordinates(params, n, rng)
    ad = autodiff_gradient(loss_fn, params, coords)
    fd = finite_diff_gradient(loss_fn, params, epsilon, coords)
    scale = max(float(ad.norm()), float(fd.norm()))
    if scale == 0:
        return 0.0, ad, fd
    return float((fd - ad).norm()) / scale, ad, fd


class LinearMapping(nn.Module):
    def __init__(self, matrix: torch.Tensor):
        super().__init__()
        self.matrix = nn.Parameter(matrix.clone())

    def forward(self, z):
        return z @ self.matrix.T.to(z.dtype)


class LinearToyGenerator(nn.Module):
    """Closed form: ``w = M z`` and ``image = tanh(sum_l B_l w_l)`` reshaped to (3, R, R)."""

    def __init__(self, latent_dim=4, layer_count=3, resolution=4, seed=0, dtype=torch.float64):
        super().__init__()
        g = RandomSource(seed, 0x11).generator()
        self.latent_dim = latent_dim
        self.layer_count = layer_count
        self.output_resolution = resolution
        self.mapping = LinearMapping(torch.randn(latent_dim, latent_dim, generator=g, dtype=dtype))
        n_pix = 3 * resolution * resolution
        self.basis = nn.Parameter(torch.randn(layer_count, n_pix, latent_dim, generator=g, dtype=dtype) * 0.3)
        self.frozen_parts = frozenset()

    def forward(self, ws):
        flat = torch.einsum("lpd,nld->np", self.basis.to(ws.dtype), ws)
        r = self.output_resolution
        return torch.tanh(flat).view(-1, 3, r, r)

    def closed_form(self, ws: np.ndarray) -> np.ndarray:
        basis = self.basis.detach().numpy()
        out = np.zeros((ws.shape[0], basis.shape[1]))
        for n in range(ws.shape[0]):
            for l in range(self.layer_count):
                out[n] += basis[l] @ ws[n, l]
        r = self.output_resolution
        return np.tanh(out).reshape(-1, 3, r, r)


class LinearDiscriminator(nn.Module):
    """Score = <weights, image>."""

    def __init__(self, resolution=4, seed=0):
        super().__init__()
        g = RandomSource(seed, 0x12).generator()
        self.resolution = resolution
        self.weights = nn.Parameter(torch.randn(3, resolution, resolution, generator=g, dtype=torch.float64))

    def global_score(self, images):
        return (images * self.weights.to(images.dtype)).sum((1, 2, 3))
