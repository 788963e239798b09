"""Lattice fields, mask algebra and seam-aware recomposition.

Fields are plain arrays with the two trailing axes as (height, width). Every
operation here accepts numpy arrays; the elementwise ones also accept torch
tensors so they can sit inside the autograd graph during training.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None

DEFAULT_SIGMA_BLEND = 2.0
DEFAULT_DELTA = 1.0


def _is_tensor(a) -> bool:
    return torch is not None and isinstance(a, torch.Tensor)


def _check_same_shape(*arrays) -> None:
    shapes = [tuple(a.shape) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ValueError(f"shape mismatch: {shapes}")


def validate_image(x, *, raw: bool = False) -> np.ndarray:
    """Check an ImageGrid: 2-D (or batched), finite, and in [0, 1] when ``raw``."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"expected (..., H, W) grid, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("grid contains NaN or Inf")
    if raw and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("raw image intensities must lie in [0, 1]")
    return x


def validate_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim < 2:
        raise ValueError(f"expected (..., H, W) mask, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return m


def complement(m):
    """Non-lesional mask ``1 - m``."""
    return 1 - m


def truncation_radius(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at ``ceil(3 sigma)``."""
    if not sigma > 0:
        raise ValueError(f"sigma_blend must be positive, got {sigma}")
    radius = truncation_radius(sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def smooth_mask(m, sigma_blend: float = DEFAULT_SIGMA_BLEND) -> np.ndarray:
    """Soft blend map S = clamp(G_sigma * m, 0, 1).

    The lattice is edge-replicated so a constant mask stays constant. Sites
    whose whole kernel window is lesional get exactly 1 and sites whose window
    holds no lesion get exactly 0, so S reproduces ``m`` bit-for-bit there.
    Batched masks (..., H, W) are smoothed per slice.
    """
    if not sigma_blend > 0:
        raise ValueError(f"sigma_blend must be positive, got {sigma_blend}")
    m = validate_mask(m)
    if m.ndim > 2:
        flat = m.reshape(-1, *m.shape[-2:])
        return np.stack([smooth_mask(s, sigma_blend) for s in flat]).reshape(m.shape)

    mf = m.astype(np.float64)
    k = gaussian_kernel1d(sigma_blend)
    s = ndimage.convolve1d(mf, k, axis=0, mode="nearest")
    s = ndimage.convolve1d(s, k, axis=1, mode="nearest")
    np.clip(s, 0.0, 1.0, out=s)

    size = 2 * truncation_radius(sigma_blend) + 1
    inside = ndimage.minimum_filter(mf, size=size, mode="nearest") == 1.0
    outside = ndimage.maximum_filter(mf, size=size, mode="nearest") == 0.0
    s[inside] = 1.0
    s[outside] = 0.0
    return s


def ring_weight(S):
    """Boundary weight 4 S (1 - S); peaks at S = 0.5, vanishes where S is 0 or 1."""
    return 4.0 * S * (1.0 - S)


def apply_support(field, m):
    """Project a field onto the lesion support (elementwise product with m)."""
    _check_same_shape(field, m)
    if _is_tensor(field):
        m = m if _is_tensor(m) else torch.as_tensor(m)
        return field * m.to(field.dtype)
    return field * np.asarray(m, dtype=np.asarray(field).dtype)


def saturate(r, delta: float = DEFAULT_DELTA):
    """Soft-clip deviations to (-delta, delta) via delta * tanh(r / delta)."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if _is_tensor(r):
        return delta * torch.tanh(r / delta)
    return delta * np.tanh(np.asarray(r) / delta)


def recompose(x_sub, r_hat, S):
    """Seam-aware recomposition x_hat = x_sub + S * r_hat (no clamping)."""
    _check_same_shape(x_sub, r_hat, S)
    if _is_tensor(x_sub) or _is_tensor(r_hat):
        S = S if _is_tensor(S) else torch.as_tensor(S)
        return x_sub + S.to(r_hat.dtype) * r_hat
    return x_sub + S * r_hat


def clamp_unit(x):
    """Export-time clamp of a recomposed image to [0, 1]."""
    if _is_tensor(x):
        return x.clamp(0.0, 1.0)
    return np.clip(x, 0.0, 1.0)
