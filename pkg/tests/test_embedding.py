import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oneclip.core_types import ArgumentError, BackendError, BoundsError, RandomSource, UnsupportedError
from oneclip.embedding import (
    Embedder,
    FakeEmbedder,
    PatchSpec,
    clip_distance,
    cosine_similarity,
    crop_patches,
    make_embedder,
    sample_patch_locations,
)


def _images(n=2, side=32, seed=0):
    g = RandomSource(seed, 3).generator()
    return torch.rand(n, 3, side, side, generator=g, dtype=torch.float64) * 2 - 1


def test_embed_unit_norm(embedder):
    emb = embedder.embed_image(_images(3))
    assert torch.allclose(emb.norm(dim=-1), torch.ones(3, dtype=emb.dtype), atol=1e-5)


def test_embed_deterministic(embedder):
    x = _images(2)
    assert torch.equal(embedder.embed_image(x), embedder.embed_image(x))


def test_fake_embedding_matches_numpy_projection():
    emb = FakeEmbedder(seed=3)
    x = _images(2, seed=4)
    # rebuild the projection independently from its documented construction
    g = RandomSource(3, 0x0E).generator()
    proj = torch.randn(64, 3 * 32 * 32, generator=g, dtype=torch.float64).numpy() / math.sqrt(3 * 32 * 32)
    raw = x.numpy().reshape(2, -1) @ proj.T
    expected = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    np.testing.assert_allclose(emb.embed_image(x).numpy(), expected, rtol=0, atol=1e-12)


def test_fake_embedding_resizes_by_block_average():
    # bilinear (half-pixel centres) downsampling by exactly 2 is a 2x2 box average
    emb = FakeEmbedder(seed=1)
    big = _images(1, side=64, seed=9)
    small = big.reshape(1, 3, 32, 2, 32, 2).mean((3, 5))
    assert torch.allclose(emb.embed_image(big), emb.embed_image(small), atol=1e-12)


def test_text_embedding(embedder):
    v = embedder.embed_text("Photo")
    assert abs(float(v.norm()) - 1) < 1e-5
    assert torch.equal(v, embedder.embed_text("Photo"))
    assert not torch.equal(v, embedder.embed_text("Sketch"))


def test_empty_text_rejected(embedder):
    with pytest.raises(ArgumentError):
        embedder.embed_text("")


def test_text_unsupported():
    class ImageOnly(FakeEmbedder):
        supports_text = False

    with pytest.raises(UnsupportedError):
        ImageOnly().embed_text("Photo")


def test_embed_rejects_wrong_channels(embedder):
    with pytest.raises(ArgumentError):
        embedder.embed_image(torch.zeros(1, 1, 32, 32))


def test_unknown_backend():
    with pytest.raises(BackendError):
        make_embedder("nope")


def test_clip_backend_load_failure(tmp_path, monkeypatch):
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    with pytest.raises(BackendError):
        make_embedder("clip", str(tmp_path / "missing"))


def test_base_embedder_is_abstract():
    class Bare(Embedder):
        output_dim = 4
        input_resolution = 8

    with pytest.raises(NotImplementedError):
        Bare().embed_image(torch.zeros(1, 3, 8, 8))


def test_cosine_and_distance_cases():
    a = torch.tensor([1.0, 0.0])
    b = torch.tensor([0.0, 1.0])
    assert cosine_similarity(a, a) == 1 and clip_distance(a, a) == 0
    assert cosine_similarity(a, b) == 0 and clip_distance(a, b) == 1
    assert cosine_similarity(a, -a) == -1 and clip_distance(a, -a) == 2


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_distance_is_one_minus_similarity(seed):
    g = RandomSource(seed).generator()
    a, b = torch.nn.functional.normalize(torch.randn(2, 8, generator=g, dtype=torch.float64), dim=-1)
    assert clip_distance(a, b) == 1 - cosine_similarity(a, b)
    assert cosine_similarity(a, b) == cosine_similarity(b, a)
    assert 0 <= clip_distance(a, b) <= 2


def test_crop_identity():
    x = _images(2, side=16)
    assert torch.equal(crop_patches(x, PatchSpec(16, ((0, 0),))), x)


def test_crop_ramp_means():
    # image value = 0.01 * column; patch means differ by slope * column offset
    cols = torch.arange(32, dtype=torch.float64) * 0.01
    x = cols.expand(1, 3, 32, 32).clone()
    a, b = crop_patches(x, PatchSpec(8, ((0, 2), (4, 20))))
    assert math.isclose(float(b.mean() - a.mean()), 0.01 * 18, abs_tol=1e-12)


def test_crop_exact_window_and_order():
    x = torch.arange(2 * 3 * 8 * 8, dtype=torch.float64).view(2, 3, 8, 8)
    out = crop_patches(x, PatchSpec(3, ((1, 2), (5, 0))))
    assert out.shape == (4, 3, 3, 3)
    assert torch.equal(out[0], x[0, :, 1:4, 2:5])
    assert torch.equal(out[1], x[1, :, 1:4, 2:5])
    assert torch.equal(out[3], x[1, :, 5:8, 0:3])


@pytest.mark.parametrize("loc", [(-1, 0), (0, -1), (6, 0), (0, 7)])
def test_crop_out_of_bounds(loc):
    with pytest.raises(BoundsError):
        crop_patches(torch.zeros(1, 3, 8, 8), PatchSpec(3, (loc,)))


def test_embed_patches_keeps_unit_norm(embedder):
    crops = crop_patches(_images(2), PatchSpec(16, ((0, 0), (8, 3), (16, 16))))
    assert torch.allclose(embedder.embed_image(crops).norm(dim=-1), torch.ones(6, dtype=torch.float64), atol=1e-5)


def test_sample_locations_full_size():
    assert sample_patch_locations(RandomSource(0), 32, 32, 4) == [(0, 0)] * 5


def test_sample_locations_deterministic_and_in_bounds():
    a = sample_patch_locations(RandomSource(7), 64, 32, 8)
    assert a == sample_patch_locations(RandomSource(7), 64, 32, 8)
    assert len(a) == 9
    assert all(0 <= t <= 32 and 0 <= l <= 32 for t, l in a)


def test_sample_locations_errors():
    with pytest.raises(ArgumentError):
        sample_patch_locations(RandomSource(0), 16, 32, 1)
    with pytest.raises(ArgumentError):
        sample_patch_locations(RandomSource(0), 16, 8, 0)


def test_sample_locations_uniform_chi_square():
    g = RandomSource(11).generator()
    locs = np.array([loc for _ in range(2500) for loc in sample_patch_locations(g, 64, 32, 3)])
    assert len(locs) == 10_000
    for axis in range(2):
        counts = np.bincount(locs[:, axis], minlength=33)
        assert len(counts) == 33
        assert stats.chisquare(counts).pvalue > 1e-3
    joint = np.bincount(locs[:, 0] * 33 + locs[:, 1], minlength=33 * 33)
    assert stats.chisquare(joint).pvalue > 1e-3
