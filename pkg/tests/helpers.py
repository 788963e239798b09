"""Test-only stand-ins for the noise predictor and small fixtures."""

import numpy as np
import torch


class PlantedOracle(torch.nn.Module):
    """Returns the exact eps that the closed form would pair with a planted r*.

    Given r_t = sqrt(abar_t) r* + sqrt(1 - abar_t) eps on the support, this
    predictor solves for eps, so any correct sampler must land on r*.
    """

    def __init__(self, r_star, sched):
        super().__init__()
        self.r_star = torch.as_tensor(r_star)
        self.abar = torch.tensor(np.array(sched.alpha_bar))

    def forward(self, inp, t):
        r_t = inp[:, 0]
        ab = self.abar[t - 1].to(r_t.dtype).view(-1, 1, 1)
        r_star = self.r_star.to(r_t.dtype)
        eps = (r_t - ab.sqrt() * r_star) / (1 - ab).sqrt()
        return eps[:, None]


class DenseNoise(torch.nn.Module):
    """Returns large dense noise everywhere, including off the support."""

    def __init__(self, seed=0, scale=3.0):
        super().__init__()
        self.gen = torch.Generator().manual_seed(seed)
        self.scale = scale

    def forward(self, inp, t):
        B, _, H, W = inp.shape
        noise = torch.randn((B, 1, H, W), generator=self.gen, dtype=torch.float64)
        return (self.scale * noise + 1.0).to(inp.dtype)


def blob_mask(rng, H=16, W=16, max_blobs=3, max_r=5):
    m = np.zeros((H, W), np.uint8)
    yy, xx = np.mgrid[:H, :W]
    for _ in range(rng.integers(1, max_blobs + 1)):
        ci, cj, r = rng.integers(0, H), rng.integers(0, W), rng.integers(1, max_r + 1)
        m[(yy - ci) ** 2 + (xx - cj) ** 2 <= r * r] = 1
    return m
