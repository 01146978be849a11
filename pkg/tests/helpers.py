"""Small shared helpers for the test modules."""

from __future__ import annotations

import torch

from oneclip import RandomSource, sample_w, synthesize
from oneclip.generator import clone_generator


def perturbed_clone(G, scale=0.05, seed=1):
    """A trainable copy of ``G`` nudged away from it, so losses are off their minimum."""
    G_t = clone_generator(G).requires_grad_(True)
    g = RandomSource(seed, 0xAB).generator()
    with torch.no_grad():
        for p in G_t.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return G_t


def target_image(G, seed=5):
    with torch.no_grad():
        return synthesize(G, sample_w(G, RandomSource(seed, 0x77), 1))


def rig_patches(rigged, G_s, G_t, w, spec, pos, negs):
    """Prescribe embeddings so the anchor/positive/negative dots equal ``pos`` and ``negs``."""
    from oneclip.embedding import PatchSpec, crop_patches
    from oneclip.oracles import unit_vectors_with_dots

    with torch.no_grad():
        img_s = synthesize(G_s, w)
        img_t = synthesize(G_t, w)
    v, v_pos, v_negs = unit_vectors_with_dots(pos, negs, rigged.output_dim)
    anchor = crop_patches(img_t, PatchSpec(spec.size, spec.locations[:1]))[0]
    source = crop_patches(img_s, spec)
    rigged.rig_image(anchor, v)
    rigged.rig_image(source[0], v_pos)
    for crop, vec in zip(source[1:], v_negs):
        rigged.rig_image(crop, vec)
    return rigged
