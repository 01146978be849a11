import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oneclip.core_types import (
    ArgumentError,
    LatentCode,
    LatentKind,
    RandomSource,
    RangeError,
    ShapeError,
    pairwise_index,
    validate_image_batch,
)


def test_validate_accepts_zeros():
    validate_image_batch(torch.zeros(2, 3, 64, 64))


def test_validate_rejects_out_of_range():
    batch = torch.zeros(2, 3, 64, 64)
    batch[1, 0, 5, 5] = 1.5
    with pytest.raises(RangeError):
        validate_image_batch(batch)


def test_validate_rejects_non_power_of_two():
    with pytest.raises(ShapeError):
        validate_image_batch(torch.zeros(1, 3, 60, 64))


@pytest.mark.parametrize("shape", [(3, 8, 8), (1, 1, 8, 8), (1, 3, 8, 0)])
def test_validate_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        validate_image_batch(torch.zeros(shape))


def test_validate_rejects_nan():
    batch = torch.zeros(1, 3, 4, 4)
    batch[0, 0, 0, 0] = float("nan")
    with pytest.raises(RangeError):
        validate_image_batch(batch)


@given(st.integers(1, 5), st.sampled_from([1, 2, 4, 8, 16]), st.floats(-1, 1))
@settings(max_examples=30, deadline=None)
def test_validate_accepts_any_valid_batch(n, side, value):
    validate_image_batch(torch.full((n, 3, side, side), value))


def test_pairwise_index_two():
    assert pairwise_index(2) == [(0, 1)]


def test_pairwise_index_four_has_six_pairs():
    # enumerate C(4, 2) by brute force
    expected = [(i, j) for i in range(4) for j in range(4) if i < j]
    assert sorted(pairwise_index(4)) == expected
    assert len(pairwise_index(4)) == 6


@pytest.mark.parametrize("n", [1, 0, -3])
def test_pairwise_index_rejects_small(n):
    with pytest.raises(ArgumentError):
        pairwise_index(n)


@pytest.mark.parametrize("n", range(2, 17))
def test_pairwise_index_exhaustive(n):
    pairs = pairwise_index(n)
    assert len(pairs) == len(set(pairs)) == n * (n - 1) // 2
    assert set(pairs) == {(i, j) for i, j in itertools.product(range(n), repeat=2) if i < j}


def test_latent_shapes():
    assert LatentCode.w(torch.zeros(4)).dim == 4
    assert len(LatentCode.w(torch.zeros(3, 4))) == 3
    assert len(LatentCode.wplus(torch.zeros(8, 4))) == 1
    with pytest.raises(ShapeError):
        LatentCode.w(torch.zeros(1, 2, 3))
    with pytest.raises(ShapeError):
        LatentCode.wplus(torch.zeros(4))


def test_latent_rejects_non_finite():
    with pytest.raises(RangeError):
        LatentCode.w(torch.tensor([0.0, float("inf")]))


def test_broadcast_and_add():
    w = LatentCode.w(torch.arange(3.0))
    wp = w.broadcast(5)
    assert wp.kind == LatentKind.WPLUS and wp.data.shape == (1, 5, 3)
    assert torch.equal(wp.data[0, 4], w.data)
    total = w + LatentCode.wplus(torch.ones(5, 3))
    assert total.data.shape == (1, 5, 3)
    assert torch.equal(total.data[0, 2], w.data + 1)
    with pytest.raises(ShapeError):
        w + LatentCode.w(torch.zeros(4))
    with pytest.raises(ShapeError):
        LatentCode.wplus(torch.zeros(5, 3)) + LatentCode.wplus(torch.zeros(6, 3))


def test_broadcast_rejects_wrong_layer_count():
    with pytest.raises(ShapeError):
        LatentCode.wplus(torch.zeros(4, 3)).broadcast(5)


@given(st.integers(0, 2**63 - 1), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_random_source_reproducible(seed, stream):
    a = torch.randn(5, generator=RandomSource(seed, stream).generator())
    b = torch.randn(5, generator=RandomSource(seed, stream).generator())
    assert torch.equal(a, b)


def test_random_source_streams_differ():
    a = torch.randn(5, generator=RandomSource(1, 0).generator())
    b = torch.randn(5, generator=RandomSource(1, 1).generator())
    assert not torch.equal(a, b)
