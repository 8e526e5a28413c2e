"""Reverse-mode autodiff over dense numpy arrays.

A Tape records primitive operations in execution order (which is a valid
topological order), so backward is a single reverse sweep. Tensors are thin
wrappers around numpy arrays; leaf tensors with requires_grad accumulate
into .grad.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "recording", "active_tape", "forward_record",
    "backward", "NonFiniteError", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "pow_", "exp", "log", "sqrt",
    "tanh", "sigmoid", "softplus", "silu", "sum_", "mean", "matmul",
    "reshape", "transpose", "getitem", "concat", "stack", "where",
    "maximum", "minimum", "clip", "pad", "scatter_add", "softmax",
    "layer_norm",
]


class NonFiniteError(RuntimeError):
    """Raised when a NaN/Inf appears in a checked forward pass."""

    def __init__(self, op_name, op_index):
        super().__init__(f"non-finite values in op '{op_name}' (tape index {op_index})")
        self.op_name = op_name
        self.op_index = op_index


class _Node:
    __slots__ = ("name", "out", "parents", "bwd", "index")

    def __init__(self, name, out, parents, bwd, index):
        self.name = name
        self.out = out
        self.parents = parents
        self.bwd = bwd
        self.index = index


class Tape:
    """Ordered record of primitive ops plus cost counters."""

    def __init__(self, check_finite=False):
        self.nodes = []
        self.flops = 0
        self.bytes_allocated = 0
        self.check_finite = check_finite
        self.outputs = []

    def backward(self, seed=None, output=None):
        if output is None:
            if len(self.outputs) != 1:
                raise ValueError("tape has no unique registered output; pass output=")
            output = self.outputs[0]
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise ValueError(
                f"seed shape {seed.shape} does not match output shape {output.data.shape}")
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.bwd(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                cur = grads.get(id(p))
                grads[id(p)] = pg if cur is None else cur + pg
        out = {}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and p._leaf and id(p) in grads \
                        and id(p) not in out:
                    g = grads[id(p)]
                    p.grad = g.copy() if p.grad is None else p.grad + g
                    out[id(p)] = p
        if output._leaf and output.requires_grad:
            output.grad = seed.copy() if output.grad is None else output.grad + seed
            out[id(output)] = output
        return list(out.values())


_TAPES: list[Tape] = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


class recording:
    """Context manager pushing a Tape onto the active stack."""

    def __init__(self, tape=None, check_finite=False):
        self.tape = tape if tape is not None else Tape(check_finite=check_finite)

    def __enter__(self):
        _TAPES.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _coerce_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32:
        return arr
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name, data, parents, bwd, flops=None):
    """Wrap a computed array into a Tensor, recording onto the active tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._leaf = False
    tape = active_tape()
    if tape is not None:
        tape.flops += flops if flops is not None else data.size
        tape.bytes_allocated += data.nbytes
        if tape.check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(name, len(tape.nodes))
        if out.requires_grad:
            tape.nodes.append(_Node(name, out, parents, bwd, len(tape.nodes)))
    if not out.requires_grad:
        out._leaf = True
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * out / b.data, b.data.shape)))


def neg(a):
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def pow_(a, p):
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _record("pow", out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a):
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _record("silu", out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record("sum", out, (a,), bwd, flops=a.data.size)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------- linalg

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data
    m = a.data.shape[-2] if a.data.ndim > 1 else 1
    k = a.data.shape[-1]
    n = b.data.shape[-1] if b.data.ndim > 1 else 1
    batch = int(out.size // max(m * n, 1))
    flops = 2 * batch * m * n * k

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad2 = ad[None, :]
            g2 = g[None, ...] if bd.ndim > 1 else g[None, None]
        else:
            ad2, g2 = ad, g
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            gb = (ad2.reshape(-1, k).T @ np.asarray(g).reshape(-1)).reshape(bd.shape)
            return (_unbroadcast(ga, ad.shape), gb)
        if ad.ndim == 1:
            ga = (g2 @ np.swapaxes(bd, -1, -2)).reshape(-1, k).sum(0)
            gb = np.swapaxes(ad2, -1, -2) @ g2
            return (ga, _unbroadcast(gb, bd.shape))
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record("matmul", out, (a, b), bwd, flops=flops)


# -------------------------------------------------------------- shape/index

def reshape(a, shape):
    a = _as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(a.data.shape),), flops=0)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes).copy(), (a,),
                   lambda g: (g.transpose(inv),), flops=0)


def getitem(a, idx):
    a = _as_tensor(a)
    out = a.data[idx]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)
    else:
        out = np.ascontiguousarray(out)

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record("getitem", out, (a,), bwd, flops=out.size)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(parts), bwd, flops=0)


def stack(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", out, tuple(parts), bwd, flops=0)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.data.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _record("where", out, (a, b), bwd)


def maximum(a, c):
    a = _as_tensor(a)
    c = float(c)
    mask = a.data > c
    return _record("maximum", np.maximum(a.data, c), (a,),
                   lambda g: (np.where(mask, g, 0.0),))


def minimum(a, c):
    a = _as_tensor(a)
    c = float(c)
    mask = a.data < c
    return _record("minimum", np.minimum(a.data, c), (a,),
                   lambda g: (np.where(mask, g, 0.0),))


def clip(a, lo, hi):
    a = _as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,),
                   lambda g: (np.where(mask, g, 0.0),))


def pad(a, pad_width):
    a = _as_tensor(a)
    out = np.pad(a.data, pad_width)
    slices = tuple(slice(p[0], p[0] + s) for p, s in zip(pad_width, a.data.shape))
    return _record("pad", out, (a,), lambda g: (g[slices],), flops=0)


def scatter_add(index, src, shape):
    """out[index] += src rows; index is a plain integer array over axis 0."""
    src = _as_tensor(src)
    index = np.asarray(index)
    out = np.zeros(shape, dtype=src.data.dtype)
    np.add.at(out, index, src.data)
    return _record("scatter_add", out, (src,), lambda g: (g[index],), flops=src.data.size)


def bce_loss(p, target, weight=None, eps=1e-6):
    """Scalar sum of weight * BCE(clip(p, eps, 1-eps), target), fused into a
    single tape node; p holds probabilities, not logits."""
    p = _as_tensor(p)
    target = np.asarray(target, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64) if weight is not None else None
    pc = np.clip(p.data, eps, 1.0 - eps)
    terms = -(target * np.log(pc) + (1.0 - target) * np.log1p(-pc))
    if w is not None:
        terms = terms * w
    out = np.asarray(terms.sum())
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def bwd(g):
        d = (pc - target) / (pc * (1.0 - pc))
        if w is not None:
            d = d * w
        return (np.where(inside, g * d, 0.0),)

    return _record("bce_loss", out, (p,), bwd, flops=6 * p.data.size)


# --------------------------------------------------------------- composites

def softmax(a, axis=-1):
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gamma + beta


# ------------------------------------------------------------- spec surface

def forward_record(program, inputs, check_finite=True):
    """Run program under a fresh tape; returns (outputs, tape).

    inputs: dict name -> Tensor/array; passed to program as keyword args.
    """
    wrapped = {k: (v if isinstance(v, Tensor) else Tensor(v, requires_grad=True))
               for k, v in inputs.items()}
    with recording(check_finite=check_finite) as tape:
        out = program(**wrapped)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    tape.outputs = list(outs)
    return out, tape


def backward(tape, seed=None, output=None):
    return tape.backward(seed=seed, output=output)
