"""Learnable image encoder: a small stack of stride-2 convolutions shared
across cameras, producing one feature map per camera."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .nn import LayerNorm


def _im2col_indices(Hp, Wp, Ho, Wo, k, stride):
    oy, ox = np.meshgrid(np.arange(Ho) * stride, np.arange(Wo) * stride, indexing="ij")
    ky, kx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    rows = oy.reshape(-1, 1) + ky.reshape(1, -1)     # (Ho*Wo, k*k)
    cols = ox.reshape(-1, 1) + kx.reshape(1, -1)
    return rows * Wp + cols


class ConvBlock:
    """3x3 stride-2 convolution + layer norm over channels + SiLU."""

    def __init__(self, ps, name, c_in, c_out, stride=2, k=3):
        self.k, self.stride, self.c_in, self.c_out = k, stride, c_in, c_out
        self.W = ps.param(f"{name}.W", (k * k * c_in, c_out), init="xavier")
        self.b = ps.param(f"{name}.b", (c_out,), init="zeros")
        self.norm = LayerNorm(ps, f"{name}.ln", c_out)

    def __call__(self, x):
        # x: (L, H, W, C)
        L, H, W, C = x.shape
        if C != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {C}")
        Ho = -(-H // self.stride)
        Wo = -(-W // self.stride)
        pad_h = max((Ho - 1) * self.stride + self.k - H, 0)
        pad_w = max((Wo - 1) * self.stride + self.k - W, 0)
        xp = dc.pad(x, ((0, 0), (pad_h // 2, pad_h - pad_h // 2),
                        (pad_w // 2, pad_w - pad_w // 2), (0, 0)))
        Hp, Wp = H + pad_h, W + pad_w
        idx = _im2col_indices(Hp, Wp, Ho, Wo, self.k, self.stride)
        cols = xp.reshape((L, Hp * Wp, C))[:, idx, :]        # (L, Ho*Wo, k*k, C)
        cols = cols.reshape((L * Ho * Wo, self.k * self.k * C))
        y = dc.matmul(cols, self.W) + self.b
        y = dc.silu(self.norm(y))
        return y.reshape((L, Ho, Wo, self.c_out))


class ImageEncoder:
    """Per-camera feature extractor with shared weights.

    Channel plan doubles up to the latent dimension; total stride is
    2 ** len(channels).
    """

    def __init__(self, ps, latent_dim=64, channels=(16, 32)):
        dims = [3, *channels, latent_dim]
        self.blocks = [ConvBlock(ps, f"encoder.block{i}", a, b)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.latent_dim = latent_dim
        self.stride = 2 ** len(self.blocks)

    def __call__(self, images):
        """images: (L, H, W, 3) Tensor or array in [0, 1] -> (L, Hf, Wf, D)."""
        x = images if isinstance(images, dc.Tensor) else dc.constant(images)
        if x.shape[-1] != 3:
            raise ValueError(f"expected 3 image channels, got {x.shape[-1]}")
        x = x - 0.5
        for block in self.blocks:
            x = block(x)
        return x
