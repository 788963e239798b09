import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pathosyn.networks import SubstrateNet, SubstrateNetConfig
from pathosyn.substrate import (
    SubstrateLossWeights,
    estimate_substrate,
    extract_deviation,
    inpaint_reference,
    substrate_loss,
    substrate_loss_grad,
)


def harmonic_oracle(x, m):
    """Direct sparse solve of the same Laplace system (reflecting lattice edges)."""
    H, W = x.shape
    idx = -np.ones((H, W), int)
    unknown = np.argwhere(m == 1)
    idx[m == 1] = np.arange(len(unknown))
    A = sp.lil_matrix((len(unknown), len(unknown)))
    b = np.zeros(len(unknown))
    for k, (i, j) in enumerate(unknown):
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, c = i + di, j + dj
            if not (0 <= a < H and 0 <= c < W):
                continue
            A[k, k] += 1
            if m[a, c]:
                A[k, idx[a, c]] -= 1
            else:
                b[k] += x[a, c]
    u = x.astype(np.float64).copy()
    u[m == 1] = spla.spsolve(A.tocsr(), b)
    return u


def blob_mask(rng, H=20, W=20):
    m = np.zeros((H, W), np.uint8)
    for _ in range(rng.integers(1, 4)):
        ci, cj, r = rng.integers(0, H), rng.integers(0, W), rng.integers(1, 5)
        yy, xx = np.mgrid[:H, :W]
        m[(yy - ci) ** 2 + (xx - cj) ** 2 <= r * r] = 1
    return m


# --- inpaint_reference ----------------------------------------------------

def test_inpaint_constant_image():
    m = blob_mask(np.random.default_rng(0))
    x = np.full(m.shape, 0.37)
    out, ok = inpaint_reference(x, m)
    assert ok
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_inpaint_empty_mask_identity():
    x = np.random.default_rng(1).random((8, 8))
    out, ok = inpaint_reference(x, np.zeros((8, 8), np.uint8))
    assert ok and np.array_equal(out, x)


def test_inpaint_ramp_single_pixel():
    x = np.tile(np.arange(5) / 4.0, (5, 1))
    m = np.zeros((5, 5), np.uint8)
    m[2, 2] = 1
    x_bad = x.copy()
    x_bad[2, 2] = 9.0
    out, ok = inpaint_reference(x_bad, m)
    assert ok
    assert out[2, 2] == pytest.approx(0.5, abs=1e-12)
    assert np.array_equal(out[m == 0], x[m == 0])


def test_inpaint_all_ones_mask_rejected():
    with pytest.raises(ValueError, match="no healthy context"):
        inpaint_reference(np.zeros((4, 4)), np.ones((4, 4), np.uint8))


def test_inpaint_nonconvergence_flag():
    rng = np.random.default_rng(2)
    m = np.zeros((30, 30), np.uint8)
    m[3:27, 3:27] = 1
    with pytest.warns(UserWarning):
        _, ok = inpaint_reference(rng.random((30, 30)), m, max_iters=3, tol=1e-12)
    assert not ok


@pytest.mark.parametrize("seed", range(5))
def test_inpaint_matches_sparse_solve(seed):
    rng = np.random.default_rng(seed)
    m = blob_mask(rng)
    if m.all() or not m.any():
        pytest.skip("degenerate mask")
    x = rng.random(m.shape)
    out, ok = inpaint_reference(x, m, max_iters=50000, tol=1e-13)
    assert ok
    np.testing.assert_allclose(out, harmonic_oracle(x, m), atol=1e-9)
    assert np.array_equal(out[m == 0], x[m == 0])


def test_inpaint_deterministic():
    rng = np.random.default_rng(3)
    m, x = blob_mask(rng), rng.random((20, 20))
    assert np.array_equal(inpaint_reference(x, m)[0], inpaint_reference(x, m)[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_inpaint_maximum_principle(seed):
    rng = np.random.default_rng(seed)
    m = blob_mask(rng, 14, 14)
    if m.all() or not m.any():
        return
    x = rng.random(m.shape)
    out, _ = inpaint_reference(x, m)
    mb = m.astype(bool)
    near = np.zeros_like(mb)
    near[1:] |= mb[:-1]
    near[:-1] |= mb[1:]
    near[:, 1:] |= mb[:, :-1]
    near[:, :-1] |= mb[:, 1:]
    boundary = x[near & ~mb]
    assert out[mb].min() >= boundary.min() - 1e-12
    assert out[mb].max() <= boundary.max() + 1e-12


# --- substrate_loss -------------------------------------------------------

def test_substrate_loss_examples():
    w1 = SubstrateLossWeights(1.0, 1.0)
    x = np.array([[1.0, 0.0]])
    x_ph = np.array([[1.0, 0.5]])
    m = np.array([[0, 1]])
    assert substrate_loss(np.array([[0.5, 0.0]]), x, x_ph, m, w1) == pytest.approx(0.5)
    assert substrate_loss(np.array([[1.0, 0.5]]), x, x_ph, m, w1) == 0.0
    assert substrate_loss(x, x, x, m) == 0.0


def test_substrate_loss_defaults_and_errors():
    w = SubstrateLossWeights()
    assert (w.lambda_out, w.lambda_in) == (1.0, 0.1)
    with pytest.raises(ValueError):
        SubstrateLossWeights(0.0, 1.0)
    with pytest.raises(ValueError):
        substrate_loss(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_substrate_loss_nonneg_and_gradient(seed):
    rng = np.random.default_rng(seed)
    shape = (5, 6)
    m = (rng.random(shape) < 0.4).astype(np.float64)
    x, x_ph, x_sub = rng.standard_normal((3, *shape))
    w = SubstrateLossWeights(rng.uniform(0.1, 2), rng.uniform(0.1, 2))
    assert substrate_loss(x_sub, x, x_ph, m, w) >= 0
    g = substrate_loss_grad(x_sub, x, x_ph, m, w)
    h = 1e-6
    for _ in range(6):
        i, j = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        e = np.zeros(shape)
        e[i, j] = h
        fd = (substrate_loss(x_sub + e, x, x_ph, m, w) - substrate_loss(x_sub - e, x, x_ph, m, w)) / (2 * h)
        assert abs(fd - g[i, j]) <= 1e-6 * max(abs(g[i, j]), 1e-3)


def test_substrate_loss_autograd_matches_analytic():
    rng = np.random.default_rng(5)
    m = torch.tensor((rng.random((6, 6)) < 0.5).astype(np.float64))
    x, x_ph = (torch.tensor(a) for a in rng.standard_normal((2, 6, 6)))
    x_sub = torch.tensor(rng.standard_normal((6, 6)), requires_grad=True)
    substrate_loss(x_sub, x, x_ph, m).backward()
    expect = substrate_loss_grad(x_sub.detach(), x, x_ph, m)
    torch.testing.assert_close(x_sub.grad, expect)


def test_substrate_loss_normalized_per_subject():
    x_sub = np.zeros((2, 2, 2))
    x = np.ones((2, 2, 2))
    m = np.zeros((2, 2, 2))
    m[0, 0, 0] = 1
    out = substrate_loss(x_sub, x, x, m, SubstrateLossWeights(1.0, 1.0), normalized=True, per_subject=True)
    np.testing.assert_allclose(out, [1.0 + 1.0, 1.0])


# --- estimate_substrate ---------------------------------------------------

@pytest.fixture(scope="module")
def small_net():
    torch.manual_seed(0)
    return SubstrateNet(SubstrateNetConfig(resolution=16, base_width=4)).double()


def test_estimate_substrate_shape_and_determinism(small_net):
    rng = np.random.default_rng(0)
    x = rng.random((16, 16))
    m = (rng.random((16, 16)) < 0.2).astype(np.uint8)
    a = estimate_substrate(small_net, x, m)
    b = estimate_substrate(small_net, x, m)
    assert a.shape == (16, 16)
    assert np.array_equal(a, b)


def test_estimate_substrate_default_resolution():
    net = SubstrateNet(SubstrateNetConfig(base_width=4))
    out = estimate_substrate(net, np.zeros((64, 64), np.float32), np.zeros((64, 64), np.uint8))
    assert out.shape == (64, 64)


def test_estimate_substrate_resolution_mismatch(small_net):
    with pytest.raises(ValueError):
        estimate_substrate(small_net, np.zeros((32, 32)), np.zeros((32, 32), np.uint8))


def test_estimate_substrate_zero_weights_gives_zero():
    net = SubstrateNet(SubstrateNetConfig(resolution=16, base_width=4))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = estimate_substrate(net, np.random.default_rng(0).random((16, 16)).astype(np.float32),
                             np.zeros((16, 16), np.uint8))
    assert np.array_equal(out, np.zeros((16, 16), np.float32))


def test_estimate_substrate_batched_matches_single(small_net):
    rng = np.random.default_rng(1)
    x = rng.random((3, 16, 16))
    m = (rng.random((3, 16, 16)) < 0.3).astype(np.uint8)
    batched = estimate_substrate(small_net, x, m)
    for k in range(3):
        np.testing.assert_allclose(batched[k], estimate_substrate(small_net, x[k], m[k]), atol=1e-12)


# --- extract_deviation ----------------------------------------------------

def test_extract_deviation_examples():
    rng = np.random.default_rng(0)
    x = rng.random((6, 6))
    m = np.zeros((6, 6), np.uint8)
    m[2:4, 2:4] = 1
    assert np.array_equal(extract_deviation(x, x, m, 1.0), np.zeros((6, 6)))
    assert np.array_equal(extract_deviation(x, x - 5, np.zeros((6, 6), np.uint8), 1.0), np.zeros((6, 6)))
    r = extract_deviation(x, x - 0.3, m, 1.0)
    np.testing.assert_allclose(r[m == 1], 0.291313, atol=1e-6)
    assert np.all(r[m == 0] == 0)


def test_extract_deviation_shape_mismatch():
    with pytest.raises(ValueError):
        extract_deviation(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)), 1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 3.0))
def test_extract_deviation_invariants(seed, delta):
    rng = np.random.default_rng(seed)
    x, x_sub = rng.standard_normal((2, 7, 7)) * 3
    m = (rng.random((7, 7)) < 0.5).astype(np.uint8)
    r = extract_deviation(x, x_sub, m, delta)
    assert np.all(r[m == 0] == 0)
    assert np.all(np.abs(r) <= delta)
