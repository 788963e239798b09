"""Training losses: masked noise matching, deviation regularization, seam synthesis, total.

Each loss reduces over the trailing (H, W) axes and then averages over any
leading batch axes. By default every term is divided by the size of its own
support (mask area, sum of ring weights, sum of S); ``normalized=False``
gives the plain sums instead.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import _check_same_shape, _is_tensor, complement

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


@dataclass(frozen=True)
class LossWeights:
    lambda_diff: float = 1.0
    lambda_dev: float = 0.5
    lambda_syn: float = 0.5
    lambda_pat: float = 1.0
    lambda_ring: float = 1.0
    lambda_leak: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    l_sub: float
    l_diff: float
    l_dev: float
    l_syn: float
    total: float

    def as_row(self) -> dict:
        return {"l_sub": self.l_sub, "l_diff": self.l_diff, "l_dev": self.l_dev,
                "l_syn": self.l_syn, "total": self.total}


def _sum_hw(a):
    return a.sum(dim=(-2, -1)) if _is_tensor(a) else np.sum(a, axis=(-2, -1))


def _abs(a):
    return a.abs() if _is_tensor(a) else np.abs(a)


def _ratio(num, den, what: str):
    """Per-subject num / den with empty supports contributing 0, then the batch mean."""
    if _is_tensor(num):
        empty = den <= 0
        if bool(empty.any()):
            warnings.warn(f"{what}: empty support, term defined as 0")
        out = torch.where(empty, torch.zeros_like(num), num / torch.where(empty, torch.ones_like(den), den))
        return out.mean()
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    empty = den <= 0
    if np.any(empty):
        warnings.warn(f"{what}: empty support, term defined as 0")
    out = np.where(empty, 0.0, num / np.where(empty, 1.0, den))
    return float(np.mean(out))


def _mean(a):
    return a.mean() if _is_tensor(a) else float(np.mean(a))


def diffusion_loss(eps, eps_hat, m, *, normalized: bool = True):
    """||(eps - eps_hat) * m||^2, per mask-interior site by default."""
    _check_same_shape(eps, eps_hat, m)
    num = _sum_hw(((eps - eps_hat) * m) ** 2)
    if not normalized:
        return _mean(num)
    return _ratio(num, _sum_hw(m), "diffusion_loss")


def deviation_loss(r0_hat, r0, m, w_ring, w: LossWeights = LossWeights(), *, normalized: bool = True):
    """Interior fidelity + ring consistency + exterior leakage, all L1."""
    _check_same_shape(r0_hat, r0, m, w_ring)
    diff = r0_hat - r0
    pat = _sum_hw(_abs(diff * m))
    ring = _sum_hw(_abs(diff * w_ring))
    mbar = complement(m)
    leak = _sum_hw(_abs(r0_hat * mbar))
    if not normalized:
        return w.lambda_pat * _mean(pat) + w.lambda_ring * _mean(ring) + w.lambda_leak * _mean(leak)
    return (w.lambda_pat * _ratio(pat, _sum_hw(m), "deviation_loss[pat]")
            + w.lambda_ring * _ratio(ring, _sum_hw(w_ring), "deviation_loss[ring]")
            + w.lambda_leak * _ratio(leak, _sum_hw(mbar), "deviation_loss[leak]"))


def synthesis_loss(x_hat, x, S, *, normalized: bool = True):
    """||(x_hat - x) * S||_1, divided by sum(S) by default."""
    _check_same_shape(x_hat, x, S)
    num = _sum_hw(_abs((x_hat - x) * S))
    if not normalized:
        return _mean(num)
    return _ratio(num, _sum_hw(S), "synthesis_loss")


def _finite(v) -> bool:
    if _is_tensor(v):
        return bool(torch.isfinite(v).all())
    return math.isfinite(float(v))


def combine(l_sub, l_diff, l_dev, l_syn, w: LossWeights = LossWeights()):
    """Weighted total L_sub + l_diff*L_diff + l_dev*L_dev + l_syn*L_syn (keeps autograd)."""
    return l_sub + w.lambda_diff * l_diff + w.lambda_dev * l_dev + w.lambda_syn * l_syn


def total_loss(l_sub, l_diff, l_dev, l_syn, w: LossWeights = LossWeights()) -> LossBreakdown:
    terms = {"l_sub": l_sub, "l_diff": l_diff, "l_dev": l_dev, "l_syn": l_syn}
    for name, v in terms.items():
        if not _finite(v):
            raise FloatingPointError(f"non-finite loss term {name}={float(v)}")
    vals = {k: float(v) for k, v in terms.items()}
    return LossBreakdown(total=float(combine(vals["l_sub"], vals["l_diff"], vals["l_dev"], vals["l_syn"], w)), **vals)
