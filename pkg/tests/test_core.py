import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathosyn.core import (
    apply_support,
    complement,
    gaussian_kernel1d,
    recompose,
    ring_weight,
    saturate,
    smooth_mask,
    truncation_radius,
)


def random_mask(rng, shape=(24, 24), p=0.3):
    return (rng.random(shape) < p).astype(np.uint8)


masks = arrays(np.uint8, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.integers(0, 1))


# --- complement -----------------------------------------------------------

def test_complement_examples():
    assert np.array_equal(complement(np.zeros((3, 3), np.uint8)), np.ones((3, 3)))
    assert np.array_equal(complement(np.ones((3, 3), np.uint8)), np.zeros((3, 3)))
    assert np.array_equal(complement(np.array([[1, 0], [0, 1]])), [[0, 1], [1, 0]])


@given(masks)
def test_complement_is_involution(m):
    assert np.array_equal(complement(complement(m)), m)
    assert np.array_equal(complement(m) + m, np.ones_like(m))


# --- smooth_mask ----------------------------------------------------------

def test_smooth_constant_masks():
    assert np.array_equal(smooth_mask(np.ones((16, 16), np.uint8), 2.0), np.ones((16, 16)))
    assert np.array_equal(smooth_mask(np.zeros((16, 16), np.uint8), 2.0), np.zeros((16, 16)))


def test_smooth_single_pixel_centre_weight():
    m = np.zeros((9, 9), np.uint8)
    m[4, 4] = 1
    # independent oracle: evaluate the truncated Gaussian directly and normalize in 2-D
    offs = range(-3, 4)
    weights = [[math.exp(-(i * i + j * j) / 2.0) for j in offs] for i in offs]
    total = math.fsum(w for row in weights for w in row)
    centre = 1.0 / total
    S = smooth_mask(m, 1.0)
    assert S[4, 4] == pytest.approx(centre, rel=1e-12)
    assert S[4, 4] == pytest.approx(0.15924112569070245, rel=1e-12)


def test_smooth_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        smooth_mask(np.zeros((4, 4), np.uint8), 0.0)
    with pytest.raises(ValueError):
        smooth_mask(np.zeros((4, 4), np.uint8), -1.0)


def test_kernel_is_normalized_and_truncated():
    k = gaussian_kernel1d(2.0)
    assert k.size == 2 * 6 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(masks, st.floats(0.3, 3.0))
def test_blend_map_locality_and_range(m, sigma):
    S = smooth_mask(m, sigma)
    assert S.min() >= 0.0 and S.max() <= 1.0
    r = truncation_radius(sigma)
    H, W = m.shape
    ys, xs = np.nonzero(m)
    for i in range(H):
        for j in range(W):
            far = ys.size == 0 or np.min(np.maximum(np.abs(ys - i), np.abs(xs - j))) > r
            if far:
                assert S[i, j] == 0.0


def test_blend_map_exact_inside_large_lesion():
    m = np.zeros((40, 40), np.uint8)
    m[5:35, 5:35] = 1
    S = smooth_mask(m, 2.0)
    assert np.all(S[11:29, 11:29] == 1.0)
    assert np.all(ring_weight(S)[11:29, 11:29] == 0.0)


def test_blend_map_is_deterministic():
    m = random_mask(np.random.default_rng(0))
    assert np.array_equal(smooth_mask(m, 2.0), smooth_mask(m.copy(), 2.0))


def test_smooth_batched_matches_single():
    rng = np.random.default_rng(1)
    ms = np.stack([random_mask(rng) for _ in range(3)])
    out = smooth_mask(ms, 1.5)
    for k in range(3):
        assert np.array_equal(out[k], smooth_mask(ms[k], 1.5))


# --- ring_weight ----------------------------------------------------------

def test_ring_weight_examples():
    assert ring_weight(0.5) == 1.0
    assert ring_weight(0.0) == 0.0 and ring_weight(1.0) == 0.0
    assert ring_weight(0.25) == pytest.approx(4 * 0.25 * 0.75)


@given(arrays(np.float64, (5, 5), elements=st.floats(0.0, 1.0)))
def test_ring_weight_range(S):
    w = ring_weight(S)
    assert np.all(w >= 0) and np.all(w <= 1)
    assert np.all(w[(S == 0) | (S == 1)] == 0)
    assert np.all(w[S != 0.5] < 1.0)


# --- apply_support --------------------------------------------------------

def test_apply_support_examples():
    f = np.array([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal(apply_support(f, np.ones((2, 2))), f)
    assert np.array_equal(apply_support(f, np.zeros((2, 2))), np.zeros((2, 2)))
    assert np.array_equal(apply_support(f, np.array([[1, 0], [0, 1]])), [[2, 0], [0, 5]])


def test_apply_support_shape_mismatch():
    with pytest.raises(ValueError):
        apply_support(np.zeros((2, 3)), np.zeros((3, 2)))


@given(masks, st.data())
def test_support_idempotent_and_bitwise(m, data):
    f = data.draw(arrays(np.float32, m.shape, elements=st.floats(-10, 10, width=32)))
    once = apply_support(f, m)
    assert np.array_equal(apply_support(once, m), once)
    assert np.array_equal(once[m == 1].view(np.uint32), f[m == 1].view(np.uint32))
    assert np.all(once[m == 0] == 0)


def test_apply_support_torch_keeps_graph():
    f = torch.randn(4, 4, requires_grad=True)
    m = torch.tensor(np.eye(4))
    apply_support(f, m).sum().backward()
    assert torch.equal(f.grad, torch.eye(4))


# --- saturate -------------------------------------------------------------

def test_saturate_examples():
    assert saturate(np.array(0.0), 0.5) == 0.0
    assert float(saturate(np.array(1.0), 0.5)) == pytest.approx(0.5 * math.tanh(2.0), abs=1e-12)
    assert float(saturate(np.array(1.0), 0.5)) == pytest.approx(0.482014, abs=1e-6)
    assert float(saturate(np.array(-1.0), 0.5)) == pytest.approx(-0.482014, abs=1e-6)


def test_saturate_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        saturate(np.zeros(3), 0.0)


@given(arrays(np.float64, 20, elements=st.floats(-1e3, 1e3)), st.floats(0.05, 5.0))
def test_saturate_bound_sign_monotone(r, delta):
    out = saturate(r, delta)
    assert np.all(np.abs(out) <= delta)
    assert np.all(np.abs(out[np.abs(r) < 5 * delta]) < delta)
    assert np.all(np.sign(out) == np.sign(r))
    order = np.argsort(r, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


@given(masks, st.data(), st.floats(0.1, 3.0))
def test_support_and_saturation_commute(m, data, delta):
    r = data.draw(arrays(np.float64, m.shape, elements=st.floats(-5, 5)))
    assert np.array_equal(saturate(apply_support(r, m), delta), apply_support(saturate(r, delta), m))


# --- recompose ------------------------------------------------------------

def test_recompose_examples():
    rng = np.random.default_rng(3)
    x_sub = rng.random((6, 6)).astype(np.float32)
    r = rng.standard_normal((6, 6)).astype(np.float32)
    assert np.array_equal(recompose(x_sub, r, np.zeros((6, 6), np.float32)), x_sub)
    assert np.array_equal(recompose(x_sub, np.zeros_like(r), rng.random((6, 6)).astype(np.float32)), x_sub)
    one = recompose(np.array([[0.4]]), np.array([[0.2]]), np.array([[0.5]]))
    assert one[0, 0] == pytest.approx(0.4 + 0.5 * 0.2)


def test_recompose_not_clamped():
    out = recompose(np.array([[0.9]]), np.array([[0.8]]), np.array([[1.0]]))
    assert out[0, 0] == pytest.approx(1.7)


def test_recompose_exact_outside_blend_support():
    rng = np.random.default_rng(4)
    m = np.zeros((32, 32), np.uint8)
    m[12:18, 10:20] = 1
    S = smooth_mask(m, 2.0).astype(np.float32)
    x_sub = rng.random((32, 32)).astype(np.float32)
    r = rng.standard_normal((32, 32)).astype(np.float32)
    x_hat = recompose(x_sub, r, S)
    assert np.array_equal(x_hat[S == 0], x_sub[S == 0])
