import dataclasses

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oneclip import RandomSource, sample_w, synthesize
from oneclip.core_types import ArgumentError, NonFiniteError, UnsupportedError
from oneclip.embedding import FakeEmbedder, clip_distance
from oneclip.generator import mean_latent
from oneclip.latent_search import (
    SearchConfig,
    apply_augmentation,
    augment,
    image_objective,
    invert_image,
    invert_text,
    minimize_with_backoff,
    sample_augmentation,
)
from oneclip.oracles import RiggedEmbedder, gradient_check

FAST = SearchConfig(steps=30, mean_samples=2000)


def test_config_validation():
    with pytest.raises(ArgumentError):
        SearchConfig(lambda_reg=-1)
    with pytest.raises(ArgumentError):
        SearchConfig(steps=0)
    assert SearchConfig().lambda_reg == 0.01


def test_identity_augmentation():
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64, generator=RandomSource(0).generator()) * 2 - 1
    out = augment(x, RandomSource(1), 1, scale=(1.0, 1.0), jitter=0.0)
    assert torch.allclose(out, x, atol=1e-12)


@given(st.integers(0, 500), st.integers(1, 4))
@settings(max_examples=20, deadline=None)
def test_augmentation_range_and_determinism(seed, n):
    x = torch.rand(2, 3, 16, 16, generator=RandomSource(seed).generator()) * 2 - 1
    a = augment(x, RandomSource(seed, 1), n)
    assert a.shape == (2 * n, 3, 16, 16)
    assert a.min() >= -1 and a.max() <= 1
    assert torch.equal(a, augment(x, RandomSource(seed, 1), n))


def test_augmentation_row_order():
    x = torch.stack([torch.full((3, 8, 8), -0.5), torch.full((3, 8, 8), 0.5)])
    grids = sample_augmentation(RandomSource(0), 3, 8)
    out = apply_augmentation(x, grids)
    # constant images stay constant; image b occupies rows 3b .. 3b+2
    assert torch.allclose(out[:3], torch.full_like(out[:3], -0.5))
    assert torch.allclose(out[3:], torch.full_like(out[3:], 0.5))


def test_huge_regulariser_pins_to_mean(gen, embedder, perceptual):
    I_trg = synthesize(gen, sample_w(gen, RandomSource(3), 1)).detach()
    cfg = dataclasses.replace(FAST, lambda_reg=1e6, steps=15)
    res = invert_image(gen, embedder, perceptual, I_trg, cfg, RandomSource(0))
    w_mean = mean_latent(gen, cfg.mean_samples, RandomSource(0).child(1)).data
    assert torch.linalg.vector_norm(res.latent.data - w_mean) < 1e-3


def test_trace_non_increasing_and_length(gen, embedder, perceptual):
    I_trg = synthesize(gen, sample_w(gen, RandomSource(4), 1)).detach()
    res = invert_image(gen, embedder, perceptual, I_trg, FAST, RandomSource(0))
    assert len(res.trace) == FAST.steps
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.trace[-1] <= res.trace[0]
    assert res.image.shape == (1, 3, 32, 32)


def test_search_does_not_touch_generator(gen, embedder, perceptual):
    before = [p.clone() for p in gen.parameters()]
    I_trg = synthesize(gen, sample_w(gen, RandomSource(4), 1)).detach()
    invert_image(gen, embedder, perceptual, I_trg, dataclasses.replace(FAST, steps=3), RandomSource(0))
    assert all(torch.equal(a, b) and b.grad is None for a, b in zip(before, gen.parameters()))


def test_search_deterministic(gen, embedder, perceptual):
    I_trg = synthesize(gen, sample_w(gen, RandomSource(4), 1)).detach()
    cfg = dataclasses.replace(FAST, steps=5)
    a = invert_image(gen, embedder, perceptual, I_trg, cfg, RandomSource(2))
    b = invert_image(gen, embedder, perceptual, I_trg, cfg, RandomSource(2))
    assert torch.equal(a.latent.data, b.latent.data) and a.trace == b.trace


def test_target_resolution_mismatch(gen, embedder, perceptual):
    with pytest.raises(ArgumentError):
        invert_image(gen, embedder, perceptual, torch.zeros(1, 3, 16, 16), FAST, RandomSource(0))


def test_step_zero_objective_is_zero_at_mean(gen64, perceptual):
    # lambda_reg = 0, target rendered at the mean latent, identity augmentation
    emb = FakeEmbedder(0)
    w_mean = mean_latent(gen64, 2000, RandomSource(0)).data
    I_trg = synthesize(gen64, w_mean[None]).detach()
    grids = sample_augmentation(RandomSource(1), 2, 32, scale=(1.0, 1.0), jitter=0.0)
    f = image_objective(gen64, emb, perceptual, I_trg, w_mean, grids, lambda_reg=0.0)
    assert perceptual(I_trg, I_trg).item() == 0.0
    assert abs(f(w_mean).item()) < 1e-12


def test_objective_gradient_matches_finite_differences(gen64, perceptual):
    emb = FakeEmbedder(0)
    I_trg = synthesize(gen64, sample_w(gen64, RandomSource(8), 1)).detach()
    w_mean = mean_latent(gen64, 2000, RandomSource(0)).data
    grids = sample_augmentation(RandomSource(1), 4, 32)
    f = image_objective(gen64, emb, perceptual, I_trg, w_mean, grids, 0.01)
    w = (w_mean + 0.1 * torch.randn(w_mean.shape, generator=RandomSource(3).generator(), dtype=torch.float64))
    w.requires_grad_(True)
    err, ad, fd = gradient_check(lambda: f(w), [w], n=64, rng=RandomSource(5))
    assert err < 1e-3, (err, ad[:5], fd[:5])


def test_text_search_recovers_rigged_target(gen):
    rigged = RiggedEmbedder(FakeEmbedder(0))
    with torch.no_grad():
        target = rigged.embed_image(synthesize(gen, sample_w(gen, RandomSource(12), 1)))[0]
    rigged.rig_text("a rigged prompt", target.double())
    res = invert_text(gen, rigged, "a rigged prompt", SearchConfig(steps=300, mean_samples=2000), RandomSource(0))
    got = rigged.embed_image(res.image)[0]
    assert clip_distance(got.double(), target.double()) < 0.05
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))


def test_text_search_huge_regulariser(gen, embedder):
    cfg = dataclasses.replace(FAST, lambda_reg=1e6, steps=10)
    res = invert_text(gen, embedder, "Sketch", cfg, RandomSource(0))
    w_mean = mean_latent(gen, cfg.mean_samples, RandomSource(0).child(1)).data
    assert torch.linalg.vector_norm(res.latent.data - w_mean) < 1e-3


def test_text_search_errors(gen, embedder):
    with pytest.raises(ArgumentError):
        invert_text(gen, embedder, "", FAST, RandomSource(0))

    class ImageOnly(FakeEmbedder):
        supports_text = False

    with pytest.raises(UnsupportedError):
        invert_text(gen, ImageOnly(), "Photo", FAST, RandomSource(0))


def test_backoff_on_quadratic():
    w, trace = minimize_with_backoff(lambda w: (w - 3).square().sum(), torch.zeros(2, dtype=torch.float64), 400, 0.5)
    assert torch.allclose(w, torch.full((2,), 3.0, dtype=torch.float64), atol=1e-2)
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_backoff_non_finite():
    with pytest.raises(NonFiniteError):
        minimize_with_backoff(lambda w: (w * float("nan")).sum(), torch.zeros(2), 3, 0.1)
