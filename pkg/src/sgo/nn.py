"""Small neural building blocks on top of diffcore."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor


class Linear:
    def __init__(self, ps: ParamStore, name, d_in, d_out, zero_init=False, bias=True):
        init = "zeros" if zero_init else "xavier"
        self.W = ps.param(f"{name}.W", (d_in, d_out), init=init)
        self.b = ps.param(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x):
        y = dc.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, ps, name, dim, eps=1e-5):
        self.g = ps.param(f"{name}.g", (dim,), init="ones")
        self.b = ps.param(f"{name}.b", (dim,), init="zeros")
        self.eps = eps

    def __call__(self, x):
        return dc.layer_norm(x, self.g, self.b, eps=self.eps)


class MLP:
    """Stack of linear layers with SiLU between them."""

    def __init__(self, ps, name, dims, zero_init_last=False):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            zero = zero_init_last and i == len(dims) - 2
            self.layers.append(Linear(ps, f"{name}.l{i}", a, b, zero_init=zero))

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = dc.silu(x)
        return x


class FeedForward:
    def __init__(self, ps, name, dim, expand=4):
        self.l1 = Linear(ps, f"{name}.l1", dim, expand * dim)
        self.l2 = Linear(ps, f"{name}.l2", expand * dim, dim)

    def __call__(self, x):
        return self.l2(dc.silu(self.l1(x)))


class MhaBlock:
    """Pre-norm multi-head attention block: skip connection + feed-forward."""

    def __init__(self, ps, name, dim, heads):
        if dim % heads:
            raise ValueError("latent dim must be divisible by head count")
        self.dim, self.heads, self.dh = dim, heads, dim // heads
        self.ln_q = LayerNorm(ps, f"{name}.ln_q", dim)
        self.ln_kv = LayerNorm(ps, f"{name}.ln_kv", dim)
        self.ln_ffn = LayerNorm(ps, f"{name}.ln_ffn", dim)
        self.wq = Linear(ps, f"{name}.wq", dim, dim)
        self.wk = Linear(ps, f"{name}.wk", dim, dim)
        self.wv = Linear(ps, f"{name}.wv", dim, dim)
        self.wo = Linear(ps, f"{name}.wo", dim, dim)
        self.ffn = FeedForward(ps, f"{name}.ffn", dim)

    def _split(self, x, n):
        # (n, dim) -> (heads, n, dh)
        return x.reshape((n, self.heads, self.dh)).transpose((1, 0, 2))

    def attention(self, q_in, kv_in):
        nq, nk = q_in.shape[0], kv_in.shape[0]
        q = self._split(self.wq(q_in), nq)
        k = self._split(self.wk(kv_in), nk)
        v = self._split(self.wv(kv_in), nk)
        scores = dc.matmul(q, k.transpose((0, 2, 1))) * (1.0 / np.sqrt(self.dh))
        attn = dc.softmax(scores, axis=-1)
        out = dc.matmul(attn, v)                        # (h, nq, dh)
        out = out.transpose((1, 0, 2)).reshape((nq, self.dim))
        return self.wo(out)

    def __call__(self, q, kv, skip_attention=False):
        if skip_attention:
            y = q
        else:
            y = q + self.attention(self.ln_q(q), self.ln_kv(kv))
        return y + self.ffn(self.ln_ffn(y))
