"""Fine-tuning objectives.

Every function returns a scalar tensor so it can be differentiated with
respect to the adapted generator. Source-generator images are rendered
without gradient tracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .core_types import ArgumentError, LatentCode, LengthMismatchError, pairwise_index
from .embedding import Embedder, PatchSpec, crop_patches
from .generator import global_score, patch_score, synthesize
from .presets import LAMBDA_CON, LAMBDA_PATCH, TEXT_SOURCE

CON_METRICS = ("sq", "abs")
ADV_MODES = ("literal", "logistic")


@dataclass(frozen=True)
class LossWeights:
    lambda_con: float = LAMBDA_CON
    lambda_patch: float = LAMBDA_PATCH

    def __post_init__(self):
        if self.lambda_con < 0 or self.lambda_patch < 0:
            raise ArgumentError("loss weights must be non-negative")


def _source_images(G_s, latents):
    with torch.no_grad():
        return synthesize(G_s, latents)


def profile_from_embeddings(emb: torch.Tensor) -> torch.Tensor:
    idx = torch.tensor(pairwise_index(emb.shape[0]))
    return (emb[idx[:, 0]] * emb[idx[:, 1]]).sum(-1)


def similarity_profile(gen, embedder: Embedder, latents: LatentCode) -> torch.Tensor:
    """Cosine similarity of every unordered pair of generated images, in ``pairwise_index`` order."""
    if len(latents) < 2:
        raise ArgumentError("similarity profile needs at least 2 latents")
    return profile_from_embeddings(embedder.embed_image(synthesize(gen, latents)))


def consistency_loss(profile_s: torch.Tensor, profile_t: torch.Tensor, metric: str = "sq") -> torch.Tensor:
    """Mean over pairs of the squared (or absolute) profile difference."""
    if profile_s.shape != profile_t.shape:
        raise LengthMismatchError(f"profiles of length {profile_s.shape} and {profile_t.shape}")
    diff = profile_s - profile_t
    if metric == "sq":
        return diff.square().mean()
    if metric == "abs":
        return diff.abs().mean()
    raise ArgumentError(f"unknown consistency metric {metric!r}")


def patchnce_from_dots(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """``-log(e^pos / (e^pos + sum e^neg))`` along the last axis of ``neg``."""
    logits = torch.cat([pos.unsqueeze(-1), neg], -1)
    return torch.logsumexp(logits, -1) - pos


def _patch_nce_batch(img_s, img_t, embedder, specs: Sequence[PatchSpec]):
    """Mean patch contrastive loss; ``specs[b]`` holds the locations for image ``b``."""
    crops_t, crops_s = [], []
    for b, spec in enumerate(specs):
        if spec.count < 1:
            raise ArgumentError("patch spec needs an anchor and at least one negative")
        crops_t.append(crop_patches(img_t[b : b + 1], PatchSpec(spec.size, spec.locations[:1])))
        crops_s.append(crop_patches(img_s[b : b + 1], spec))
    v = embedder.embed_image(torch.cat(crops_t))
    with torch.no_grad():
        keys = embedder.embed_image(torch.cat(crops_s)).to(v.dtype)
    losses, start = [], 0
    for b, spec in enumerate(specs):
        k = keys[start : start + spec.count + 1]
        start += spec.count + 1
        dots = k @ v[b]
        losses.append(patchnce_from_dots(dots[0], dots[1:]))
    return torch.stack(losses).mean()


def patch_consistency_loss(G_s, G_t, embedder: Embedder, w: LatentCode, spec: PatchSpec) -> torch.Tensor:
    """Contrastive loss between co-located source/adapted patches of one latent."""
    w = w.as_batch()
    if len(w) != 1:
        raise ArgumentError("patch_consistency_loss takes a single latent; use rand_loss for batches")
    return _patch_nce_batch(_source_images(G_s, w), synthesize(G_t, w), embedder, [spec])


def adv_generator(score_fake: torch.Tensor, score_real: torch.Tensor, mode: str = "literal"):
    """Generator adversarial term: the raw score gap, or non-saturating logistic."""
    if mode == "literal":
        return score_fake - score_real
    if mode == "logistic":
        return F.softplus(-score_fake)
    raise ArgumentError(f"unknown adversarial mode {mode!r}")


def adv_discriminator(score_fake, score_real, r1_penalty=0.0, gamma: float = 10.0):
    """Non-saturating logistic discriminator loss plus ``gamma * r1_penalty``."""
    score_fake, score_real = torch.as_tensor(score_fake), torch.as_tensor(score_real)
    return F.softplus(score_fake) + F.softplus(-score_real) + gamma * r1_penalty


def r1_penalty(score_fn, real: torch.Tensor) -> torch.Tensor:
    """Half the mean squared norm of the score gradient at the real images."""
    real = real.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(score_fn(real).sum(), real, create_graph=True)
    return 0.5 * grad.square().sum((1, 2, 3)).mean()


def pixel_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).square().mean()


def reference_terms(G_t, w_ref: LatentCode, I_trg, perceptual, D_glob, adv_mode="literal") -> dict:
    img = synthesize(G_t, w_ref)
    terms = {"pixel": pixel_loss(img, I_trg), "perceptual": perceptual(img, I_trg)}
    if D_glob is not None:
        terms["adv"] = adv_generator(
            global_score(D_glob, img).mean(), global_score(D_glob, I_trg).mean(), adv_mode
        )
    return terms


def reference_loss(G_t, w_ref, I_trg, perceptual, D_glob, adv_mode="literal") -> torch.Tensor:
    """Pixel mean-square + perceptual + global adversarial term at the reference latent."""
    return sum(reference_terms(G_t, w_ref, I_trg, perceptual, D_glob, adv_mode).values())


def rand_terms(
    G_s,
    G_t,
    embedder: Embedder,
    latents: LatentCode,
    specs: Sequence[PatchSpec],
    D_patch=None,
    I_trg=None,
    patch_layers: Sequence[int] = (),
    con_metric: str = "sq",
    adv_mode: str = "literal",
) -> dict:
    """Unweighted consistency, patch and patch-adversarial terms on sampled latents."""
    if len(latents) < 2:
        raise ArgumentError("need at least 2 latents")
    if len(specs) != len(latents):
        raise LengthMismatchError("one patch spec per latent is required")
    img_s = _source_images(G_s, latents)
    img_t = synthesize(G_t, latents)
    with torch.no_grad():
        prof_s = profile_from_embeddings(embedder.embed_image(img_s))
    prof_t = profile_from_embeddings(embedder.embed_image(img_t))
    terms = {
        "con": consistency_loss(prof_s.to(prof_t.dtype), prof_t, con_metric),
        "patch": _patch_nce_batch(img_s, img_t, embedder, specs),
    }
    if D_patch is not None:
        terms["adv"] = adv_generator(
            patch_score(D_patch, img_t, patch_layers).mean(),
            patch_score(D_patch, I_trg, patch_layers).mean(),
            adv_mode,
        )
    return terms


def rand_loss(
    G_s,
    G_t,
    embedder,
    latents,
    specs,
    weights: LossWeights = LossWeights(),
    D_patch=None,
    I_trg=None,
    patch_layers=(),
    con_metric="sq",
    adv_mode="literal",
) -> torch.Tensor:
    t = rand_terms(G_s, G_t, embedder, latents, specs, D_patch, I_trg, patch_layers, con_metric, adv_mode)
    total = weights.lambda_con * t["con"] + weights.lambda_patch * t["patch"]
    return total + t["adv"] if "adv" in t else total


def text_direction(embedder: Embedder, t_src: str, t_trg: str) -> torch.Tensor:
    direction = embedder.embed_text(t_trg) - embedder.embed_text(t_src)
    if torch.linalg.vector_norm(direction) < 1e-12:
        raise ArgumentError("source and target prompts embed identically")
    return direction


def directional_from_embeddings(emb_t: torch.Tensor, emb_s: torch.Tensor, delta_text: torch.Tensor):
    """Mean of ``1 - cos(dI, dT)``; samples with ``|dI| < 1e-8`` contribute exactly 1."""
    delta_img = emb_t - emb_s.to(emb_t.dtype)
    delta_text = delta_text.to(emb_t.dtype)
    norm = torch.linalg.vector_norm(delta_img, dim=-1)
    degenerate = norm < 1e-8
    cos = (delta_img @ delta_text) / (norm.clamp_min(1e-8) * torch.linalg.vector_norm(delta_text))
    return torch.where(degenerate, torch.ones_like(cos), 1 - cos).mean()


def directional_loss(
    embedder: Embedder, G_s, G_t, w: LatentCode, t_src: str = TEXT_SOURCE, t_trg: str = ""
) -> torch.Tensor:
    delta_text = text_direction(embedder, t_src, t_trg)
    with torch.no_grad():
        emb_s = embedder.embed_image(synthesize(G_s, w))
    return directional_from_embeddings(embedder.embed_image(synthesize(G_t, w)), emb_s, delta_text)


def text_terms(
    G_s,
    G_t,
    embedder: Embedder,
    latents: LatentCode,
    w_ref: LatentCode,
    specs: Sequence[PatchSpec],
    t_src: str = TEXT_SOURCE,
    t_trg: str = "",
    con_metric: str = "sq",
) -> dict:
    terms = rand_terms(G_s, G_t, embedder, latents, specs, con_metric=con_metric)
    terms["dir"] = directional_loss(embedder, G_s, G_t, latents, t_src, t_trg)
    terms["dir_ref"] = directional_loss(embedder, G_s, G_t, w_ref, t_src, t_trg)
    return terms


def text_loss(G_s, G_t, embedder, latents, w_ref, specs, t_src=TEXT_SOURCE, t_trg="", con_metric="sq"):
    """Unweighted sum of consistency, patch and both directional terms."""
    return sum(text_terms(G_s, G_t, embedder, latents, w_ref, specs, t_src, t_trg, con_metric).values())


def patchnce_bounds(n_negatives: int) -> tuple[float, float]:
    return math.log1p(n_negatives * math.exp(-2)), math.log1p(n_negatives * math.exp(2))
