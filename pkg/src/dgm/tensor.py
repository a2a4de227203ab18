"""Dense tensors with tape-free reverse-mode differentiation.

Every op records its parents and a backward closure that is itself written in
terms of tensor ops, so gradients can be differentiated again
(``grad(..., create_graph=True)``). That is what the gradient penalty needs:
the norm of an input gradient is a function of the parameters.

Values are checked after every op; a NaN or Inf raises ``FloatingPointError``
naming the op instead of silently propagating.
"""
import math
from contextlib import contextmanager

import numpy as np

from . import _kernels

LEAKY_SLOPE = 0.2

_recording = True


@contextmanager
def no_grad():
    """Evaluate ops without recording them for differentiation."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


@contextmanager
def _record(flag):
    global _recording
    prev = _recording
    _recording = flag
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name", "grad")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf. ``gate`` is an elementwise multiplier applied to the
    gradient by :func:`backward` before any optimizer sees it."""

    __slots__ = ("gate",)

    def __init__(self, data, name=None, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self.gate = None


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(out, op):
    # a finite sum proves every entry finite; only overflow needs the full scan
    if math.isfinite(np.add.reduce(out, axis=None)):
        return
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite value produced by op '{op}'")


def _make(data, parents, backward_fn, op):
    _check(data, op)
    out = Tensor(data)
    out.op = op
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(shape) if s == 1 and g.shape[i + ndiff] != 1)
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    if ndiff:
        out = reshape(out, shape)
    elif out.shape != shape:
        out = reshape(out, shape)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        return _sum_to(g, a.shape), _sum_to(neg(g), b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a):
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    out_data = a.data / b.data

    def bw(g):
        ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb
    return _make(out_data, (a, b), bw, "div")


def exp(a):
    def bw(g):
        return (mul(g, out),)
    out = _make(np.exp(a.data), (a,), bw, "exp")
    return out


def log(a):
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a):
    def bw(g):
        return (div(g, mul(out, 2.0)),)
    out = _make(np.sqrt(a.data), (a,), bw, "sqrt")
    return out


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),), "square")


def tanh(a):
    def bw(g):
        return (mul(g, sub(1.0, mul(out, out))),)
    out = _make(np.tanh(a.data), (a,), bw, "tanh")
    return out


def sigmoid(a):
    def bw(g):
        return (mul(g, mul(out, sub(1.0, out))),)
    out = _make(_kernels.sigmoid(a.data), (a,), bw, "sigmoid")
    return out


def leaky_relu(a, slope=LEAKY_SLOPE):
    def bw(g):
        # piecewise-linear: the slope is constant almost everywhere
        return (mul(g, Tensor(_kernels.leaky_slope(a.data, slope))),)
    return _make(_kernels.leaky_relu(a.data, slope), (a,), bw, "leaky_relu")


def identity(a):
    return a


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": identity,
}


# ---------------------------------------------------------------- shape ops

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def broadcast_to(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_sum_to(g, old),), "broadcast_to")


def tsum(a, axis=None, keepdims=False):
    old = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            kshape = list(old)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, kshape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(old))
        return (broadcast_to(g, old),)
    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(take(g, slice(bounds[i], bounds[i + 1]), axis) for i in range(len(tensors)))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def take(a, index, axis=1):
    """Basic slice along one axis (``index`` is a ``slice``)."""
    sl = [slice(None)] * a.ndim
    sl[axis] = index
    old = a.shape
    return _make(a.data[tuple(sl)].copy(), (a,),
                 lambda g: (_scatter(g, index, axis, old),), "take")


def _scatter(g, index, axis, shape):
    sl = [slice(None)] * len(shape)
    sl[axis] = index
    out = np.zeros(shape, dtype=g.data.dtype)
    out[tuple(sl)] = g.data
    return _make(out, (g,), lambda gg: (take(gg, index, axis),), "scatter")


# ---------------------------------------------------------------- reductions used by losses

def log_softmax(a):
    """Row-wise log-softmax of a 2-D tensor."""
    shift = a.data.max(axis=1, keepdims=True)
    z = a.data - shift
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_data = z - lse

    def bw(g):
        soft = exp(out)
        return (sub(g, mul(soft, tsum(g, axis=1, keepdims=True))),)
    out = _make(out_data, (a,), bw, "log_softmax")
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    onehot = np.zeros((n, k), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    return neg(mean(tsum(mul(log_softmax(logits), Tensor(onehot)), axis=1)))


def row_norm(a):
    """L2 norm of each row; the gradient at a zero row is taken as zero."""
    def bw(g):
        safe = add(out, Tensor((out.data == 0).astype(out.data.dtype)))
        return (mul(reshape(g, (-1, 1)), div(a, reshape(safe, (-1, 1)))),)
    out = _make(np.sqrt(np.sum(a.data * a.data, axis=1)), (a,), bw, "row_norm")
    return out


def dense(x, W, b):
    """Affine map ``x @ W + b`` for a batch ``x`` of shape (batch, n)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"dense: input shape {x.shape} does not conform to weight shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"dense: bias shape {b.shape} does not conform to weight shape {W.shape}")
    return add(matmul(x, W), b)


# ---------------------------------------------------------------- differentiation

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    Inputs that ``output`` does not depend on receive zeros. With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    if output.data.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    for x in inputs:
        if not x.requires_grad:
            raise ValueError(f"input {x!r} is not marked differentiable")
    grads = {id(output): Tensor(np.ones_like(output.data))}
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]
    with _record(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros_like(x.data)))
    for g in out:
        _check(g.data, "backward")
    return out


def backward(loss, params):
    """Populate ``p.grad`` (a gated ndarray) for every parameter and return
    them as a dict keyed by parameter name (or position)."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    grads = grad(loss, params) if params else []
    result = {}
    for i, (p, g) in enumerate(zip(params, grads)):
        arr = g.data
        gate = getattr(p, "gate", None)
        if gate is not None:
            arr = arr * gate
        p.grad = arr
        result[p.name if p.name is not None else i] = arr
    return result


def input_gradient_norm(output, x, create_graph=False):
    """Per-sample L2 norm of d(output)/dx for a scalar ``output``."""
    if not x.requires_grad:
        raise ValueError("input is not designated differentiable; build it with requires_grad=True")
    (gx,) = grad(output, [x], create_graph=create_graph)
    with _record(create_graph):
        return row_norm(reshape(gx, (gx.shape[0], -1)))
