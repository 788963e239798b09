"""Noise schedule and mask-constrained forward/reverse diffusion of deviation fields.

Timesteps are 1-based (t = 1..T). ``t`` may be a Python int or, for batched
training, a length-B integer array/tensor; per-step coefficients are then
broadcast over the trailing (H, W) axes. ``alpha_bar`` at t = 0 is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .core import _is_tensor, apply_support

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None

SIGMA_LARGE = "large"
SIGMA_SMALL = "small"


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)
    sigma_kind: str = SIGMA_LARGE

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta_t must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ValueError("beta must be nondecreasing")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if self.sigma_kind == SIGMA_LARGE:
            sigma = np.sqrt(beta)
        elif self.sigma_kind == SIGMA_SMALL:
            prev = np.concatenate([[1.0], alpha_bar[:-1]])
            sigma = np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * beta)
        else:
            raise ValueError(f"unknown sigma_kind {self.sigma_kind!r}")
        for name, value in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar), ("sigma", sigma)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        tt = np.asarray(t.cpu() if _is_tensor(t) else t)
        if tt.size == 0 or tt.min() < lo or tt.max() > self.T:
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")

    def alpha_bar_at(self, t):
        """alpha_bar with the t = 0 convention alpha_bar_0 = 1 (vectorized)."""
        ab = np.concatenate([[1.0], self.alpha_bar])
        return ab[np.asarray(t)]

    def to_dict(self) -> dict:
        return {"beta": [float(b) for b in self.beta], "sigma_kind": self.sigma_kind}


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                    sigma_kind: str = SIGMA_LARGE) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64), sigma_kind=sigma_kind)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    ddim_steps: int = 50
    ddim_eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ancestral", "ddim"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be positive")
        if not 0.0 <= self.ddim_eta <= 1.0:
            raise ValueError("ddim_eta must lie in [0, 1]")


def _coef(values: np.ndarray, t, like):
    """values[t - 1] as a scalar, or shaped (B, 1, ..., 1) to broadcast against ``like``."""
    if np.ndim(t) == 0 and not (_is_tensor(t) and t.dim() > 0):
        return float(values[int(t) - 1])
    idx = np.asarray(t.cpu() if _is_tensor(t) else t, dtype=np.int64) - 1
    v = values[idx].reshape((-1,) + (1,) * (like.ndim - 1))
    if _is_tensor(like):
        return torch.as_tensor(v, dtype=like.dtype, device=like.device)
    return v.astype(np.asarray(like).dtype, copy=False)


def _sqrt(a):
    return np.sqrt(a) if isinstance(a, (float, np.ndarray)) else a.sqrt()


def forward_sample(r0, t, eps, sched: NoiseSchedule, m):
    """Closed-form r_t = (sqrt(abar_t) r0 + sqrt(1 - abar_t) eps) * m."""
    sched.check_t(t)
    ab = _coef(sched.alpha_bar, t, r0)
    return apply_support(_sqrt(ab) * r0 + _sqrt(1.0 - ab) * eps, m)


def forward_one_step(r_prev, t, noise, sched: NoiseSchedule, m):
    """One Markov step q(r_t | r_{t-1}) with the support projection."""
    sched.check_t(t)
    b = _coef(sched.beta, t, r_prev)
    return apply_support(_sqrt(1.0 - b) * r_prev + _sqrt(b) * noise, m)


def estimate_clean(r_t, eps_hat, t, sched: NoiseSchedule, m):
    """Denoised estimate r0_hat = ((r_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)) * m."""
    sched.check_t(t)
    ab = _coef(sched.alpha_bar, t, r_t)
    return apply_support((r_t - _sqrt(1.0 - ab) * eps_hat) / _sqrt(ab), m)


def _is_zero(z) -> bool:
    if z is None:
        return True
    if _is_tensor(z):
        return not bool(torch.any(z != 0))
    return not np.any(np.asarray(z) != 0)


def ancestral_step(r_t, eps_hat, t: int, z, sched: NoiseSchedule, m):
    """Reverse DDPM transition r_t -> r_{t-1}, projected onto the support.

    ``z`` is the fresh Gaussian draw; it must be zero (or None) at t = 1.
    """
    sched.check_t(t)
    if int(t) == 1 and not _is_zero(z):
        raise ValueError("the reverse step at t = 1 must not add noise")
    a = float(sched.alpha[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    mean = (r_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if int(t) > 1 and z is not None:
        mean = mean + float(sched.sigma[t - 1]) * z
    return apply_support(mean, m)


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab = float(sched.alpha_bar_at(t))
    ab_prev = float(sched.alpha_bar_at(t_prev))
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)


def ddim_step(r_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, eta: float, z, m):
    """Strided DDIM update t -> t_prev (t_prev = 0 lands on the clean estimate)."""
    sched.check_t(t)
    if not 0 <= t_prev < t:
        raise ValueError(f"invalid DDIM step pair ({t}, {t_prev})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if eta == 0.0 and not _is_zero(z):
        raise ValueError("deterministic DDIM (eta = 0) takes no noise")
    r0_hat = estimate_clean(r_t, eps_hat, t, sched, m)
    ab_prev = float(sched.alpha_bar_at(t_prev))
    sig = ddim_sigma(sched, t, t_prev, eta)
    out = np.sqrt(ab_prev) * r0_hat + np.sqrt(max(1.0 - ab_prev - sig**2, 0.0)) * eps_hat
    if sig > 0.0 and z is not None:
        out = out + sig * z
    return apply_support(out, m)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending grid T = t_0 > ... > t_{steps-1} > 0, followed by the final 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"ddim_steps must lie in [1, {T}]")
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    if np.any(np.diff(grid) >= 0):  # pragma: no cover - linspace rounding keeps it strict
        raise ValueError("degenerate DDIM grid")
    return grid


def _draw(shape, dtype, seed: int, subject_ids, tag, sample_indices, *extra):
    """Stack per-element standard normal draws keyed by (seed, subject, tag, sample, extra)."""
    out = np.stack([rng.normal(shape, seed, sid, tag, k, *extra) for sid, k in zip(subject_ids, sample_indices)])
    return torch.as_tensor(out, dtype=dtype)


def sample_deviation(eps_net, x_sub, m, sched: NoiseSchedule, cfg: SamplerConfig,
                     subject_ids=None, sample_index=0):
    """Draw deviation fields for a batch of subjects by reverse diffusion.

    ``x_sub`` and ``m`` are (B, H, W) (or a single (H, W)). ``eps_net`` is any
    callable taking the (B, 3, H, W) condition stack and (B,) timesteps, as
    used by :func:`pathosyn.networks.predict_noise`. All noise is keyed by
    (cfg.seed, subject id, sample index, step), so outputs do not depend on
    how subjects are batched. ``sample_index`` is an int or one per element,
    which lets several samples of one subject share a batch.
    """
    from .networks import predict_noise

    single = np.ndim(x_sub) == 2
    x_sub = torch.as_tensor(np.asarray(x_sub) if not _is_tensor(x_sub) else x_sub)
    m = torch.as_tensor(np.asarray(m) if not _is_tensor(m) else m)
    if single:
        x_sub, m = x_sub[None], m[None]
    dtype = x_sub.dtype if x_sub.is_floating_point() else torch.float32
    x_sub = x_sub.to(dtype)
    m = m.to(dtype)
    B, H, W = x_sub.shape
    if subject_ids is None:
        subject_ids = [str(i) for i in range(B)]
    if len(subject_ids) != B:
        raise ValueError("one subject id per batch element is required")
    samples = [int(sample_index)] * B if np.ndim(sample_index) == 0 else [int(k) for k in sample_index]
    if len(samples) != B:
        raise ValueError("one sample index per batch element is required")
    empty = [sid for sid, mk in zip(subject_ids, m) if not bool(mk.any())]
    if empty:
        raise ValueError(f"empty mask: nothing to synthesize for {empty}")

    r = apply_support(_draw((H, W), dtype, cfg.seed, subject_ids, "init", samples), m)
    with torch.no_grad():
        if cfg.kind == "ancestral":
            for t in range(sched.T, 0, -1):
                tt = torch.full((B,), t, dtype=torch.long)
                eps_hat = predict_noise(eps_net, r, x_sub, m, tt)
                z = _draw((H, W), dtype, cfg.seed, subject_ids, "z", samples, t) if t > 1 else None
                r = ancestral_step(r, eps_hat, t, z, sched, m)
        else:
            grid = ddim_timesteps(sched.T, cfg.ddim_steps)
            for t, t_prev in zip(grid[:-1], grid[1:]):
                t, t_prev = int(t), int(t_prev)
                tt = torch.full((B,), t, dtype=torch.long)
                eps_hat = predict_noise(eps_net, r, x_sub, m, tt)
                z = None
                if cfg.ddim_eta > 0 and t_prev > 0:
                    z = _draw((H, W), dtype, cfg.seed, subject_ids, "z", samples, t)
                r = ddim_step(r, eps_hat, t, t_prev, sched, cfg.ddim_eta, z, m)
    return r[0] if single else r
