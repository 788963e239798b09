"""Anatomical substrate estimation and deviation-target extraction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_DELTA,
    _check_same_shape,
    _is_tensor,
    apply_support,
    complement,
    saturate,
    validate_mask,
)

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


@dataclass(frozen=True)
class SubstrateLossWeights:
    lambda_out: float = 1.0
    lambda_in: float = 0.1

    def __post_init__(self):
        if not (self.lambda_out > 0 and self.lambda_in > 0):
            raise ValueError("substrate loss weights must be strictly positive")


def _neighbour_sum_and_count(u: np.ndarray):
    total = np.zeros_like(u)
    count = np.zeros_like(u)
    total[1:, :] += u[:-1, :]
    count[1:, :] += 1
    total[:-1, :] += u[1:, :]
    count[:-1, :] += 1
    total[:, 1:] += u[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += u[:, 1:]
    count[:, :-1] += 1
    return total, count


def inpaint_reference(x, m, max_iters: int = 2000, tol: float = 1e-5):
    """Harmonic fill of the lesion from its healthy surroundings.

    Sites on the complement keep ``x`` exactly. Lesional sites solve the
    discrete Laplace equation (4-neighbourhood, reflecting lattice edges)
    with Dirichlet data taken from the complement, by Jacobi relaxation.

    Returns ``(x_ph, converged)``; ``converged`` is False when the largest
    per-site update was still >= ``tol`` after ``max_iters`` sweeps.
    """
    x = np.asarray(x, dtype=np.float64)
    m = validate_mask(m).astype(bool)
    _check_same_shape(x, m)
    if x.ndim != 2:
        raise ValueError("inpaint_reference works on single (H, W) grids")
    if m.all():
        raise ValueError("no healthy context: mask covers the whole lattice")
    if not m.any():
        return x.copy(), True

    u = x.copy()
    # start from the mean of healthy values bordering the lesion
    ring = (~m) & _dilate4(m)
    u[m] = x[ring].mean()

    _, count = _neighbour_sum_and_count(np.ones_like(u))
    converged = False
    for _ in range(max_iters):
        total, _ = _neighbour_sum_and_count(u)
        update = total[m] / count[m]
        change = np.max(np.abs(update - u[m]))
        u[m] = update
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"harmonic inpainting did not reach tol={tol} in {max_iters} sweeps")
    return u, converged


def _dilate4(m: np.ndarray) -> np.ndarray:
    d = m.copy()
    d[1:, :] |= m[:-1, :]
    d[:-1, :] |= m[1:, :]
    d[:, 1:] |= m[:, :-1]
    d[:, :-1] |= m[:, 1:]
    return d


def _reduce_sum(a, keep_batch: bool):
    if keep_batch:
        return a.sum(dim=(-2, -1)) if _is_tensor(a) else a.sum(axis=(-2, -1))
    return a.sum()


def substrate_loss(x_sub, x, x_ph, m, w: SubstrateLossWeights = SubstrateLossWeights(),
                   *, normalized: bool = False, per_subject: bool = False):
    """lambda_out * ||(x_sub - x) * (1-m)||^2 + lambda_in * ||(x_sub - x_ph) * m||^2.

    Plain sums of squares by default. With ``normalized`` each term is divided
    by the area of its own support (empty supports contribute 0). With
    ``per_subject`` the sums run over the trailing (H, W) axes only.
    """
    _check_same_shape(x_sub, x, x_ph, m)
    mbar = complement(m)
    outer = _reduce_sum(((x_sub - x) * mbar) ** 2, per_subject)
    inner = _reduce_sum(((x_sub - x_ph) * m) ** 2, per_subject)
    if normalized:
        n_out = _reduce_sum(mbar, per_subject)
        n_in = _reduce_sum(m, per_subject)
        outer = outer / _safe_area(n_out)
        inner = inner / _safe_area(n_in)
    return w.lambda_out * outer + w.lambda_in * inner


def _safe_area(n):
    if _is_tensor(n):
        return n.clamp(min=1)
    return np.maximum(n, 1)


def substrate_loss_grad(x_sub, x, x_ph, m, w: SubstrateLossWeights = SubstrateLossWeights()):
    """Analytic gradient of the unnormalized substrate loss in ``x_sub``."""
    mbar = complement(m)
    return 2 * w.lambda_out * (x_sub - x) * mbar + 2 * w.lambda_in * (x_sub - x_ph) * m


def substrate_input(x, m):
    """Two-channel network input (x * (1-m), 1-m) stacked on a channel axis."""
    mbar = complement(m)
    if _is_tensor(x):
        mbar = mbar.to(x.dtype)
        return torch.stack([x * mbar, mbar], dim=-3)
    mbar = np.asarray(mbar, dtype=np.asarray(x).dtype)
    return np.stack([x * mbar, mbar], axis=-3)


def estimate_substrate(net, x, m):
    """Run the substrate network on (x, m); accepts (H, W) or (B, H, W).

    Torch inputs stay in the graph; numpy inputs are evaluated without
    gradients and returned as numpy.
    """
    if not _is_tensor(x):
        param = next(net.parameters())
        xt = torch.as_tensor(np.asarray(x), dtype=param.dtype)
        mt = torch.as_tensor(np.asarray(m), dtype=param.dtype)
        with torch.no_grad():
            return estimate_substrate(net, xt, mt).numpy()
    single = x.dim() == 2
    if single:
        x, m = x[None], m[None]
    out = net(substrate_input(x, m.to(x.dtype)))[:, 0]
    return out[0] if single else out


def extract_deviation(x, x_sub, m, delta: float = DEFAULT_DELTA):
    """Saturated lesion-supported residual delta * tanh(((x - x_sub) * m) / delta)."""
    _check_same_shape(x, x_sub, m)
    return saturate(apply_support(x - x_sub, m), delta)
