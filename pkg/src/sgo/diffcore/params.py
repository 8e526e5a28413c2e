"""Trainable parameter registry with Adam and global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .container import read_arrays, write_arrays
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SGCP"


class ParamStore:
    def __init__(self, seed=0, dtype=np.float64):
        self.params: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def param(self, name, shape, init="xavier", scale=None):
        """Create (or fetch) a named parameter."""
        if name in self.params:
            p = self.params[name]
            if tuple(p.data.shape) != tuple(shape):
                raise ValueError(f"parameter '{name}' exists with shape {p.data.shape}")
            return p
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif init == "normal":
            std = 0.02 if scale is None else scale
            data = self.rng.normal(0.0, std, shape).astype(self.dtype)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) >= 2 else max(shape[0], 1)
            fan_out = shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init '{init}'")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_global_norm(self):
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(sq))

    def clip_grad_norm(self, max_norm):
        norm = self.grad_global_norm()
        if max_norm is not None and norm > max_norm > 0:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def adam_step(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.step_count += 1
        b1, b2 = betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - b1) * (p.grad - m)
            v += (1.0 - b2) * (p.grad * p.grad - v)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def save(self, path):
        write_arrays(path, self.state_arrays(), magic=CHECKPOINT_MAGIC)

    def load(self, path):
        arrays = read_arrays(path, magic=CHECKPOINT_MAGIC)
        for name, arr in arrays.items():
            if name in self.params:
                if self.params[name].data.shape != arr.shape:
                    raise ValueError(f"checkpoint shape mismatch for '{name}'")
                self.params[name].data = arr.astype(self.dtype)
            else:
                self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)
        return self
