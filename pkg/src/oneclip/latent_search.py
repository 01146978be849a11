"""Reference-latent search in the source generator's W space.

Both searches start from the mean latent and run Adam with step-size
backoff: a step that raises the objective is undone and the step size
halved, so the recorded trace never increases.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch
import torch.nn.functional as F

from .core_types import (
    ArgumentError,
    LatentCode,
    NonFiniteError,
    RandomSource,
    as_generator,
)
from .embedding import Embedder, clip_distance
from .generator import mean_latent, no_param_grad, synthesize
from .presets import LAMBDA_REG


@dataclass(frozen=True)
class SearchConfig:
    lambda_reg: float = LAMBDA_REG
    steps: int = 500
    step_size: float = 0.02
    augmentations_per_step: int = 4
    mean_samples: int = 10_000
    aug_scale: tuple[float, float] = (0.7, 1.0)
    aug_jitter: float = 0.05

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ArgumentError("lambda_reg must be non-negative")
        if self.steps < 1:
            raise ArgumentError("steps must be at least 1")


class SearchResult(NamedTuple):
    latent: LatentCode
    image: torch.Tensor
    trace: list[float]


def _homographies(dst: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
    """Solve for 3x3 maps sending each ``dst`` quad onto ``src`` (both (n, 4, 2))."""
    n = dst.shape[0]
    x, y = dst[..., 0], dst[..., 1]
    u, v = src[..., 0], src[..., 1]
    zeros, ones = torch.zeros_like(x), torch.ones_like(x)
    rows_u = torch.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y], -1)
    rows_v = torch.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y], -1)
    a = torch.cat([rows_u, rows_v], 1)
    b = torch.cat([u, v], 1)
    h = torch.linalg.solve(a, b)
    return torch.cat([h, torch.ones(n, 1, dtype=h.dtype)], 1).view(n, 3, 3)


def sample_augmentation(
    rng: RandomSource | torch.Generator,
    n: int,
    size: int,
    scale: tuple[float, float] = (0.7, 1.0),
    jitter: float = 0.05,
) -> torch.Tensor:
    """Sampling grids (n, size, size, 2) for random resized crops with corner jitter."""
    if n < 1:
        raise ArgumentError("n must be at least 1")
    g = as_generator(rng)
    r = torch.rand(n, 11, generator=g, dtype=torch.float64)
    s = scale[0] + (scale[1] - scale[0]) * r[:, 0]
    cx = (1 - s) * (2 * r[:, 1] - 1)
    cy = (1 - s) * (2 * r[:, 2] - 1)
    quad = torch.tensor([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], dtype=torch.float64)
    src = quad[None] * s[:, None, None] + torch.stack([cx, cy], -1)[:, None, :]
    src = src + jitter * (2 * r[:, 3:].view(n, 4, 2) - 1)
    h = _homographies(quad.expand(n, 4, 2), src)
    coords = (2 * torch.arange(size, dtype=torch.float64) + 1) / size - 1
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")
    pts = torch.stack([gx, gy, torch.ones_like(gx)], -1).view(1, -1, 3)
    mapped = pts @ h.transpose(1, 2)
    grid = mapped[..., :2] / mapped[..., 2:]
    return grid.clamp(-1, 1).view(n, size, size, 2)


def apply_augmentation(images: torch.Tensor, grids: torch.Tensor) -> torch.Tensor:
    """Warp each image with every grid; output row ``b * n + i``."""
    n = grids.shape[0]
    src = images.repeat_interleave(n, dim=0)
    grid = grids.repeat(images.shape[0], 1, 1, 1).to(images.dtype)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)


def augment(
    images: torch.Tensor,
    rng: RandomSource | torch.Generator,
    n: int,
    scale: tuple[float, float] = (0.7, 1.0),
    jitter: float = 0.05,
) -> torch.Tensor:
    grids = sample_augmentation(rng, n, images.shape[-1], scale, jitter)
    return apply_augmentation(images, grids)


def image_objective(
    G_s,
    embedder: Embedder,
    perceptual,
    I_trg: torch.Tensor,
    w_mean: torch.Tensor,
    grids: torch.Tensor,
    lambda_reg: float,
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Step-one objective as a function of a single W vector."""
    with torch.no_grad():
        target_emb = embedder.embed_image(I_trg)

    def objective(w):
        img = synthesize(G_s, w[None])
        emb = embedder.embed_image(apply_augmentation(img, grids))
        clip_term = clip_distance(emb, target_emb).mean()
        pixel = (img - I_trg).square().mean()
        return clip_term + pixel + perceptual(img, I_trg) + lambda_reg * torch.linalg.vector_norm(w - w_mean)

    return objective


def text_objective(
    G_s, embedder: Embedder, t_trg: str, w_mean: torch.Tensor, lambda_reg: float
) -> Callable[[torch.Tensor], torch.Tensor]:
    target_emb = embedder.embed_text(t_trg)

    def objective(w):
        emb = embedder.embed_image(synthesize(G_s, w[None]))
        clip_term = clip_distance(emb, target_emb.to(emb.dtype)).mean()
        return clip_term + lambda_reg * torch.linalg.vector_norm(w - w_mean)

    return objective


def minimize_with_backoff(
    objective: Callable[[torch.Tensor], torch.Tensor], start: torch.Tensor, steps: int, step_size: float
) -> tuple[torch.Tensor, list[float]]:
    """Adam from ``start``; rejected steps are reverted and halve the step size.

    ``trace[k]`` is the objective at the iterate entering step ``k``.
    """
    w = start.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=step_size)
    f = objective(w)
    trace = []
    for _ in range(steps):
        value = f.item()
        if not torch.isfinite(f):
            raise NonFiniteError(f"search objective became {value}")
        trace.append(value)
        opt.zero_grad()
        f.backward()
        saved_w, saved_opt = w.detach().clone(), copy.deepcopy(opt.state_dict())
        opt.step()
        f_new = objective(w)
        if f_new.item() <= value:
            f = f_new
            continue
        lr = opt.param_groups[0]["lr"] / 2
        with torch.no_grad():
            w.copy_(saved_w)
        opt.load_state_dict(saved_opt)
        opt.param_groups[0]["lr"] = lr
        f = objective(w)
    return w.detach(), trace


def invert_image(
    G_s,
    embedder: Embedder,
    perceptual,
    I_trg: torch.Tensor,
    cfg: SearchConfig = SearchConfig(),
    rng: RandomSource = RandomSource(0),
) -> SearchResult:
    """Find the W latent whose source image best matches ``I_trg``."""
    if I_trg.shape[-1] != G_s.output_resolution:
        raise ArgumentError(
            f"target is {I_trg.shape[-1]}px, generator renders {G_s.output_resolution}px"
        )
    I_trg = I_trg.to(next(G_s.parameters()).dtype)
    w_mean = mean_latent(G_s, cfg.mean_samples, rng.child(1)).data
    grids = sample_augmentation(
        rng.child(2), cfg.augmentations_per_step, I_trg.shape[-1], cfg.aug_scale, cfg.aug_jitter
    )
    objective = image_objective(G_s, embedder, perceptual, I_trg, w_mean, grids, cfg.lambda_reg)
    with no_param_grad(G_s):
        w, trace = minimize_with_backoff(objective, w_mean, cfg.steps, cfg.step_size)
    with torch.no_grad():
        image = synthesize(G_s, w[None])
    return SearchResult(LatentCode.w(w), image, trace)


def invert_text(
    G_s,
    embedder: Embedder,
    t_trg: str,
    cfg: SearchConfig = SearchConfig(),
    rng: RandomSource = RandomSource(0),
) -> SearchResult:
    """Find the W latent whose source image best matches the prompt ``t_trg``."""
    w_mean = mean_latent(G_s, cfg.mean_samples, rng.child(1)).data
    objective = text_objective(G_s, embedder, t_trg, w_mean, cfg.lambda_reg)
    with no_param_grad(G_s):
        w, trace = minimize_with_backoff(objective, w_mean, cfg.steps, cfg.step_size)
    with torch.no_grad():
        image = synthesize(G_s, w[None])
    return SearchResult(LatentCode.w(w), image, trace)
