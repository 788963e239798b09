"""Substrate U-Net, conditional noise predictor and sinusoidal time embedding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

# Residual branches end in a near-zero convolution: each block starts close to
# the identity while every parameter still receives gradient at init.
RESIDUAL_INIT_SCALE = 1e-2


def time_embedding(t, dim: int):
    """Sinusoidal embedding [sin(t w_k) ..., cos(t w_k) ...], w_k = 10000^(-2k/dim).

    Scalar ``t`` gives a numpy vector of length ``dim``; a tensor of shape (B,)
    gives a (B, dim) tensor.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    if isinstance(t, torch.Tensor):
        dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
        k = torch.arange(half, dtype=torch.float64)
        omega = (10000.0 ** (-2.0 * k / dim)).to(dtype)
        arg = t.to(dtype)[:, None] * omega[None, :]
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    if t < 0:
        raise ValueError("timestep must be nonnegative")
    omega = 10000.0 ** (-2.0 * np.arange(half) / dim)
    return np.concatenate([np.sin(t * omega), np.cos(t * omega)])


def _groups(channels: int) -> int:
    return math.gcd(channels, 8) if channels >= 16 else 1


def _norm(channels: int, kind: str) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(_groups(channels), channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, 0.0, 1.0 / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _shrink(layer: nn.Module) -> nn.Module:
    with torch.no_grad():
        layer.weight.mul_(RESIDUAL_INIT_SCALE)
    return layer


@dataclass(frozen=True)
class SubstrateNetConfig:
    resolution: int = 64
    base_width: int = 32
    depth: int = 4
    width_mults: tuple = (1, 2, 4, 8, 8)
    norm: str = "group"
    in_channels: int = 2

    def __post_init__(self):
        if self.depth != 4:
            raise ValueError("the substrate U-Net has exactly four downsampling stages")
        if self.in_channels != 2:
            raise ValueError("substrate input is (masked image, mask complement)")
        if len(self.width_mults) != self.depth + 1:
            raise ValueError("need one width multiplier per level plus the bottleneck")
        if self.resolution % (2 ** self.depth):
            raise ValueError(f"resolution must be divisible by {2 ** self.depth}")
        object.__setattr__(self, "width_mults", tuple(self.width_mults))


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1), _norm(c_out, norm), nn.SiLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1), _norm(c_out, norm), nn.SiLU(),
        )

    def forward(self, x):
        return self.body(x)


class SubstrateNet(nn.Module):
    """Symmetric U-Net f_sub: (x * (1-m), 1-m) -> x_sub, linear 1-channel head."""

    def __init__(self, config: SubstrateNetConfig = SubstrateNetConfig()):
        super().__init__()
        self.config = config
        widths = [config.base_width * k for k in config.width_mults]
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        c_prev = config.in_channels
        for w in widths[:-1]:
            self.enc.append(ConvBlock(c_prev, w, config.norm))
            self.down.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
            c_prev = w
        self.mid = ConvBlock(c_prev, widths[-1], config.norm)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        c_prev = widths[-1]
        for w in reversed(widths[:-1]):
            self.up.append(nn.Conv2d(c_prev, w, 3, padding=1))
            self.dec.append(ConvBlock(2 * w, w, config.norm))
            c_prev = w
        self.head = nn.Conv2d(c_prev, 1, 1)
        _init_weights(self)

    def forward(self, inp):
        H, W = inp.shape[-2:]
        if H != self.config.resolution or W != self.config.resolution:
            raise ValueError(f"input {H}x{W} does not match configured resolution {self.config.resolution}")
        h = inp
        skips = []
        for enc, down in zip(self.enc, self.down):
            h = enc(h)
            skips.append(h)
            h = down(h)
        h = self.mid(h)
        for up, dec in zip(self.up, self.dec):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = dec(torch.cat([h, skips.pop()], dim=1))
        return self.head(h)


@dataclass(frozen=True)
class NoisePredictorConfig:
    resolution: int = 64
    base_width: int = 64
    width_mults: tuple = (1, 2, 2)
    attention_resolution: int | None = 16
    time_embed_dim: int = 64
    norm: str = "group"
    in_channels: int = 3

    def __post_init__(self):
        if self.in_channels != 3:
            raise ValueError("noise predictor input is (r_t, x_sub, m)")
        if self.time_embed_dim <= 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a positive even integer")
        object.__setattr__(self, "width_mults", tuple(self.width_mults))
        levels = len(self.width_mults)
        if self.resolution % (2 ** (levels - 1)):
            raise ValueError(f"resolution must be divisible by {2 ** (levels - 1)}")
        if self.attention_resolution is not None and self.attention_resolution not in self.sides:
            raise ValueError(
                f"attention resolution {self.attention_resolution} is never reached "
                f"from input side {self.resolution} (feature sides {self.sides})"
            )

    @property
    def sides(self) -> tuple:
        return tuple(self.resolution // 2**i for i in range(len(self.width_mults)))


class TimeResBlock(nn.Module):
    """Wide residual block; the projected time embedding is added between the convs."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, norm: str):
        super().__init__()
        self.norm1 = _norm(c_in, norm)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = _norm(c_out, norm)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Single-head spatial self-attention within each sample."""

    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.norm = _norm(channels, norm)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, H * W).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(C), dim=-1)
        h = torch.einsum("bij,bcj->bci", attn, v).reshape(B, C, H, W)
        return x + self.proj(h)


class NoisePredictor(nn.Module):
    """Conditional epsilon-predictor over the stack (r_t, x_sub, m)."""

    def __init__(self, config: NoisePredictorConfig = NoisePredictorConfig()):
        super().__init__()
        self.config = config
        c0 = config.base_width
        emb_dim = 4 * c0
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        widths = [c0 * k for k in config.width_mults]
        sides = config.sides
        attn_at = config.attention_resolution
        self.in_conv = nn.Conv2d(config.in_channels, c0, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c_prev = c0
        for i, w in enumerate(widths):
            self.down_blocks.append(TimeResBlock(c_prev, w, emb_dim, config.norm))
            self.down_attn.append(SelfAttention(w, config.norm) if sides[i] == attn_at else nn.Identity())
            last = i == len(widths) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(w, w, 3, stride=2, padding=1))
            c_prev = w

        self.mid1 = TimeResBlock(c_prev, c_prev, emb_dim, config.norm)
        self.mid_attn = SelfAttention(c_prev, config.norm) if sides[-1] == attn_at else nn.Identity()
        self.mid2 = TimeResBlock(c_prev, c_prev, emb_dim, config.norm)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up_blocks.append(TimeResBlock(c_prev + w, w, emb_dim, config.norm))
            self.up_attn.append(SelfAttention(w, config.norm) if sides[i] == attn_at else nn.Identity())
            self.upsample.append(nn.Conv2d(w, widths[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            c_prev = widths[i - 1] if i > 0 else w

        self.out_norm = _norm(c_prev, config.norm)
        self.out_conv = nn.Conv2d(c_prev, 1, 3, padding=1)

        _init_weights(self)
        for m in self.modules():
            if isinstance(m, TimeResBlock):
                _shrink(m.conv2)
            elif isinstance(m, SelfAttention):
                _shrink(m.proj)

    def forward(self, inp, t):
        H, W = inp.shape[-2:]
        if H != self.config.resolution or W != self.config.resolution:
            raise ValueError(f"input {H}x{W} does not match configured resolution {self.config.resolution}")
        if not isinstance(t, torch.Tensor):
            t = torch.full((inp.shape[0],), float(t))
        emb = self.time_mlp(time_embedding(t.to(inp.dtype), self.config.time_embed_dim))

        h = self.in_conv(inp)
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attn, self.downsample):
            h = attn(block(h, emb))
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for block, attn, up in zip(self.up_blocks, self.up_attn, self.upsample):
            h = attn(block(torch.cat([h, skips.pop()], dim=1), emb))
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))


def predict_noise(net, r_t, x_sub, m, t):
    """eps_theta([r_t, x_sub, m], t) for (B, H, W) or (H, W) fields.

    The output is the raw full-resolution prediction; projecting it onto the
    lesion support is left to the caller.
    """
    single = r_t.dim() == 2
    if single:
        r_t, x_sub, m = r_t[None], x_sub[None], m[None]
    if not isinstance(t, torch.Tensor) or t.dim() == 0:
        t = torch.full((r_t.shape[0],), int(t), dtype=torch.long)
    inp = torch.stack([r_t, x_sub.to(r_t.dtype), m.to(r_t.dtype)], dim=1)
    out = net(inp, t)[:, 0]
    return out[0] if single else out


def config_dict(config) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
