"""Gaussian Transformer: iterative refinement of Gaussian means/features via
positional encoding, induced temporal attention (ITA), induced self-attention
(ISA), deformable image cross-attention (GICA) and mean rectification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .nn import FeedForward, LayerNorm, Linear, MhaBlock, MLP

DEFAULT_ORDER = ("posenc", "ita", "isa", "gica", "rectify")


@dataclass
class GaussianState:
    means: dc.Tensor      # (N, 3) ego frame
    features: dc.Tensor   # (N, D)


class PositionalEncoder:
    """Row-wise MLP from 3D means into the latent dimension."""

    def __init__(self, ps, name, dim):
        self.mlp = MLP(ps, name, (3, dim, dim))

    def __call__(self, means):
        return self.mlp(means)


class Rectifier:
    """Residual mean update; final layer zero-initialized, so means start fixed.

    The update is tanh-bounded to delta_max per block: rendering gives zero
    gradient to a Gaussian outside every frustum, so an unbounded residual
    lets gradient noise walk Gaussians out of the cameras for good."""

    def __init__(self, ps, name, dim, delta_max=0.75):
        self.mlp = MLP(ps, name, (dim, dim, 3), zero_init_last=True)
        self.delta_max = delta_max

    def delta(self, features):
        return dc.tanh(self.mlp(features) * (1.0 / self.delta_max)) * self.delta_max

    def __call__(self, features, means):
        return means + self.delta(features)


class InducedSelfAttention:
    """Two chained attention blocks through an M-point bottleneck (O(MN))."""

    def __init__(self, ps, name, dim, m_points, heads):
        self.P = ps.param(f"{name}.P", (m_points, dim), init="normal", scale=0.02)
        self.stage1 = MhaBlock(ps, f"{name}.stage1", dim, heads)
        self.stage2 = MhaBlock(ps, f"{name}.stage2", dim, heads)

    def __call__(self, features):
        bottleneck = self.stage1(self.P, features)
        return self.stage2(features, bottleneck)


class InducedTemporalAttention:
    """ISA variant whose bottleneck attends over previous-frame features."""

    def __init__(self, ps, name, dim, m_points, heads):
        self.P = ps.param(f"{name}.P", (m_points, dim), init="normal", scale=0.02)
        self.stage1 = MhaBlock(ps, f"{name}.stage1", dim, heads)
        self.stage2 = MhaBlock(ps, f"{name}.stage2", dim, heads)

    def __call__(self, features, memory_features=None):
        if memory_features is None:
            return self.stage2(features, features, skip_attention=True)
        bottleneck = self.stage1(self.P, memory_features)
        return self.stage2(features, bottleneck)


class FullSelfAttention:
    """O(N^2) reference block for the scaling comparison."""

    def __init__(self, ps, name, dim, heads, n_cap=8192):
        self.block = MhaBlock(ps, name, dim, heads)
        self.n_cap = n_cap

    def __call__(self, features):
        n = features.shape[0]
        if n > self.n_cap:
            raise ValueError(
                f"full attention over {n} rows exceeds cap {self.n_cap}; use ISA")
        return self.block(features, features)


class GaussianImageCrossAttention:
    """Deformable cross-attention from Gaussians onto per-camera feature maps.

    Means are projected into every camera; K offset locations per head are
    sampled bilinearly and combined with query-derived softmax weights, then
    averaged over the cameras that see the point.
    """

    def __init__(self, ps, name, dim, heads=4, n_points=4, near=0.1):
        self.dim, self.heads, self.K = dim, heads, n_points
        self.dh = dim // heads
        self.near = near
        self.ln_q = LayerNorm(ps, f"{name}.ln_q", dim)
        self.wv = Linear(ps, f"{name}.wv", dim, dim)
        self.offsets = Linear(ps, f"{name}.off", dim, heads * n_points * 2, zero_init=True)
        self.weights = Linear(ps, f"{name}.wt", dim, heads * n_points)
        self.wo = Linear(ps, f"{name}.wo", dim, dim)
        self.ln_ffn = LayerNorm(ps, f"{name}.ln_ffn", dim)
        self.ffn = FeedForward(ps, f"{name}.ffn", dim)

    def _sample(self, value_map, x, y, Hf, Wf):
        """Bilinear sample of (Hf*Wf, h, dh) values at (N, h, K) coords."""
        x = dc.clip(x, 0.0, Wf - 1.000001)
        y = dc.clip(y, 0.0, Hf - 1.000001)
        x0 = np.floor(x.data).astype(np.int64)
        y0 = np.floor(y.data).astype(np.int64)
        wx = x - x0
        wy = y - y0
        hidx = np.arange(self.heads).reshape(1, self.heads, 1)

        def corner(ix, iy):
            return value_map[iy * Wf + ix, hidx]           # (N, h, K, dh)

        wx = dc.reshape(wx, wx.shape + (1,))
        wy = dc.reshape(wy, wy.shape + (1,))
        v00 = corner(x0, y0)
        v01 = corner(x0 + 1, y0)
        v10 = corner(x0, y0 + 1)
        v11 = corner(x0 + 1, y0 + 1)
        top = v00 * (1.0 - wx) + v01 * wx
        bot = v10 * (1.0 - wx) + v11 * wx
        return top * (1.0 - wy) + bot * wy

    def __call__(self, state: GaussianState, feats, rig, stride):
        """feats: (L, Hf, Wf, D) Tensor; rig: CameraRig matching feats."""
        N = state.features.shape[0]
        L, Hf, Wf, D = feats.shape
        if L != len(rig):
            raise ValueError("feature maps do not match camera rig")
        q = self.ln_q(state.features)
        off = self.offsets(q).reshape((N, self.heads, self.K, 2))
        logits = self.weights(q).reshape((N, self.heads, self.K))
        attn = dc.softmax(logits, axis=-1)
        acc = None
        count = np.zeros((N, 1))
        for li, cam in enumerate(rig):
            M = cam.cam_from_ego
            p_cam = dc.matmul(state.means, dc.constant(M[:3, :3].T)) + M[:3, 3]
            z = p_cam[:, 2]
            zd = z.data
            valid = zd > self.near
            z_safe = dc.where(valid, z, np.ones_like(zd))
            u = p_cam[:, 0] / z_safe * cam.fx + cam.cx
            v = p_cam[:, 1] / z_safe * cam.fy + cam.cy
            valid &= ((u.data >= 0) & (u.data < cam.width)
                      & (v.data >= 0) & (v.data < cam.height))
            if not valid.any():
                continue
            xf = u * (1.0 / stride) - 0.5
            yf = v * (1.0 / stride) - 0.5
            x = dc.reshape(xf, (N, 1, 1)) + off[:, :, :, 0]
            y = dc.reshape(yf, (N, 1, 1)) + off[:, :, :, 1]
            vm = self.wv(feats[li].reshape((Hf * Wf, D))).reshape((Hf * Wf, self.heads, self.dh))
            sampled = self._sample(vm, x, y, Hf, Wf)        # (N, h, K, dh)
            per_head = (sampled * dc.reshape(attn, (N, self.heads, self.K, 1))).sum(axis=2)
            mask = valid.astype(np.float64)[:, None]
            contrib = per_head.reshape((N, self.dim)) * mask
            acc = contrib if acc is None else acc + contrib
            count += mask
        if acc is None:
            update = dc.constant(np.zeros((N, self.dim)))
        else:
            update = self.wo(acc * (1.0 / np.maximum(count, 1.0)))
            update = update * (count > 0).astype(np.float64)
        y_out = state.features + update
        return y_out + self.ffn(self.ln_ffn(y_out))


@dataclass
class TransformerConfig:
    n_gaussians: int = 512
    latent_dim: int = 64
    n_blocks: int = 2
    m_inducing: int = 64
    heads: int = 4
    gica_points: int = 4
    near: float = 0.1
    extents: tuple = ((-8.0, 8.0), (-8.0, 8.0), (-0.4, 2.8))
    order: tuple = DEFAULT_ORDER
    attention: str = "induced"   # or "full"
    full_attention_cap: int = 8192


class _Block:
    def __init__(self, ps, name, cfg: TransformerConfig):
        d, h = cfg.latent_dim, cfg.heads
        self.posenc = PositionalEncoder(ps, f"{name}.posenc", d)
        self.ita = InducedTemporalAttention(ps, f"{name}.ita", d, cfg.m_inducing, h)
        if cfg.attention == "full":
            self.isa = FullSelfAttention(ps, f"{name}.isa", d, h, cfg.full_attention_cap)
        else:
            self.isa = InducedSelfAttention(ps, f"{name}.isa", d, cfg.m_inducing, h)
        self.gica = GaussianImageCrossAttention(ps, f"{name}.gica", d, h,
                                                cfg.gica_points, cfg.near)
        self.rectify = Rectifier(ps, f"{name}.rect", d)


def _grid_init_means(rng, n, extents):
    """Jittered uniform grid filling the scene extents."""
    ext = np.asarray(extents, dtype=np.float64)
    spans = ext[:, 1] - ext[:, 0]
    # per-axis counts proportional to spans with product >= n
    gm = spans.prod() ** (1.0 / 3.0)
    counts = np.maximum(1, np.ceil(n ** (1.0 / 3.0) * spans / gm).astype(int))
    while counts.prod() < n:
        counts[np.argmax(spans / counts)] += 1
    axes = [ext[i, 0] + (np.arange(counts[i]) + 0.5) * spans[i] / counts[i]
            for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    pts = pts[rng.permutation(pts.shape[0])[:n]]
    jitter = rng.uniform(-0.5, 0.5, pts.shape) * (spans / counts)
    return pts + jitter


class GaussianTransformer:
    def __init__(self, ps, cfg: TransformerConfig):
        if cfg.m_inducing >= cfg.n_gaussians and cfg.attention == "induced":
            raise ValueError("inducing point count must be smaller than N")
        self.cfg = cfg
        self.ps = ps
        init_means = _grid_init_means(ps.rng, cfg.n_gaussians, cfg.extents)
        self.init_means = ps.param("transformer.init_means",
                                   (cfg.n_gaussians, 3), init="zeros")
        self.init_means.data[...] = init_means
        self.init_features = ps.param("transformer.init_features",
                                      (cfg.n_gaussians, cfg.latent_dim),
                                      init="normal", scale=0.02)
        self.blocks = [_Block(ps, f"transformer.block{b}", cfg)
                       for b in range(cfg.n_blocks)]

    def initial_state(self):
        return GaussianState(means=self.init_means, features=self.init_features)

    def run_blocks(self, feats, rig, stride, memory=None, state=None):
        """Execute B blocks; memory is (means, features) numpy pair or None."""
        state = state or self.initial_state()
        means, features = state.means, state.features
        for bi, block in enumerate(self.blocks):
            mem_features = None
            if memory is not None:
                mem_means, mem_feats = memory
                mem_features = (dc.constant(mem_feats)
                                + block.posenc(dc.constant(mem_means)))
            for module in self.cfg.order:
                if module == "posenc":
                    features = features + block.posenc(means)
                elif module == "ita":
                    features = block.ita(features, mem_features)
                elif module == "isa":
                    features = block.isa(features)
                elif module == "gica":
                    features = block.gica(GaussianState(means, features),
                                          feats, rig, stride)
                elif module == "rectify":
                    means = block.rectify(features, means)
                else:
                    raise ValueError(f"unknown module '{module}'")
                probe = features if module != "rectify" else means
                if not np.all(np.isfinite(probe.data)):
                    raise dc.NonFiniteError(f"block{bi}.{module}", bi)
        return GaussianState(means=means, features=features)
