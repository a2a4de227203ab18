"""First-order optimizers that respect gradient gates.

An entry whose gate is exactly zero is skipped entirely: its value and its
Adam moments stay bit-identical. Without this, Adam would keep moving a
frozen weight on stale momentum even though its gradient is zero.
"""
import numpy as np

from . import _kernels


def _pad_to(arr, shape):
    if arr.shape == shape:
        return arr
    out = np.zeros(shape, dtype=arr.dtype)
    out[tuple(slice(0, s) for s in arr.shape)] = arr
    return out


class Optimizer:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr
        self.updates = 0

    def _active(self, p):
        if p.gate is None:
            return np.ones(p.data.shape, dtype=np.bool_)
        return np.ascontiguousarray(np.broadcast_to(p.gate != 0, p.data.shape))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {p.name}")
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            self._update(p, np.ascontiguousarray(p.grad, dtype=p.data.dtype), self._active(p))
        self.updates += 1

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        pass


class SGD(Optimizer):
    def _update(self, p, g, active):
        _kernels.sgd_update(p.data, g, active, self.lr)


class Adam(Optimizer):
    def __init__(self, params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def _update(self, p, g, active):
        key = id(p)
        if key not in self.m:
            self.m[key] = np.zeros_like(p.data)
            self.v[key] = np.zeros_like(p.data)
            self.t[key] = 0
        # parameters grown by capacity expansion get fresh zero moments
        self.m[key] = _pad_to(self.m[key], p.data.shape)
        self.v[key] = _pad_to(self.v[key], p.data.shape)
        if not active.any():
            return
        self.t[key] += 1
        t = self.t[key]
        _kernels.adam_update(p.data, g, self.m[key], self.v[key], active,
                             self.lr, self.b1, self.b2, self.eps,
                             1.0 - self.b1 ** t, 1.0 - self.b2 ** t)

    def state_arrays(self):
        out = {}
        for p in self.params:
            key = id(p)
            if key in self.m:
                out[f"{p.name}.m"] = self.m[key]
                out[f"{p.name}.v"] = self.v[key]
                out[f"{p.name}.t"] = np.array([self.t[key]], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        for p in self.params:
            if f"{p.name}.m" in arrays:
                key = id(p)
                self.m[key] = arrays[f"{p.name}.m"].copy()
                self.v[key] = arrays[f"{p.name}.v"].copy()
                self.t[key] = int(arrays[f"{p.name}.t"][0])


def make_optimizer(kind, params, lr, **kw):
    if kind == "adam":
        return Adam(params, lr=lr, **kw)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")
