"""Elementwise hot kernels with a numba path and a pure-numpy fallback.

Set ``DGM_DISABLE_NUMBA=1`` to force the numpy implementations (useful for
debugging and for environments where numba is unavailable). The two paths
agree to rounding; each path on its own is deterministic.
"""
import os

import numpy as np

_DISABLED = os.environ.get("DGM_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def _np_leaky_slope(x, slope):
    return np.where(x > 0, 1.0, slope).astype(x.dtype)


def _np_adam_update(p, g, m, v, active, lr, b1, b2, eps, bc1, bc2):
    idx = active
    m[idx] = b1 * m[idx] + (1.0 - b1) * g[idx]
    v[idx] = b2 * v[idx] + (1.0 - b2) * g[idx] * g[idx]
    p[idx] -= lr * (m[idx] / bc1) / (np.sqrt(v[idx] / bc2) + eps)


def _np_sgd_update(p, g, active, lr):
    p[active] -= lr * g[active]


def _np_count_flips(a, b):
    return int(np.count_nonzero(a != b))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_sigmoid(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            xi = flat[i]
            if xi >= 0:
                out[i] = 1.0 / (1.0 + np.exp(-xi))
            else:
                ex = np.exp(xi)
                out[i] = ex / (1.0 + ex)
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_leaky_relu(x, slope):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            out[i] = flat[i] if flat[i] > 0 else slope * flat[i]
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_leaky_slope(x, slope):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            out[i] = 1.0 if flat[i] > 0 else slope
        return out.reshape(x.shape)

    @njit(cache=True)
    def _nb_adam_update(p, g, m, v, active, lr, b1, b2, eps, bc1, bc2):
        for i in range(p.size):
            if not active[i]:
                continue
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    @njit(cache=True)
    def _nb_sgd_update(p, g, active, lr):
        for i in range(p.size):
            if active[i]:
                p[i] -= lr * g[i]

    @njit(cache=True)
    def _nb_count_flips(a, b):
        n = 0
        for i in range(a.size):
            if a[i] != b[i]:
                n += 1
        return n


# ---------------------------------------------------------------- dispatch

def sigmoid(x):
    x = np.asarray(x)
    if HAVE_NUMBA and x.dtype.kind == "f":
        return _nb_sigmoid(np.ascontiguousarray(x))
    return _np_sigmoid(x)


def leaky_relu(x, slope):
    if HAVE_NUMBA:
        return _nb_leaky_relu(np.ascontiguousarray(x), x.dtype.type(slope))
    return _np_leaky_relu(x, slope)


def leaky_slope(x, slope):
    """Derivative of leaky ReLU, 1 where x > 0 and ``slope`` elsewhere."""
    if HAVE_NUMBA:
        return _nb_leaky_slope(np.ascontiguousarray(x), x.dtype.type(slope))
    return _np_leaky_slope(x, slope)


def adam_update(p, g, m, v, active, lr, b1, b2, eps, bc1, bc2):
    """In-place Adam step restricted to ``active`` entries.

    All arrays must be contiguous and share a shape. Inactive entries keep
    their parameter and both moments untouched.
    """
    if HAVE_NUMBA:
        _nb_adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                        active.reshape(-1), lr, b1, b2, eps, bc1, bc2)
    else:
        _np_adam_update(p, g, m, v, active, lr, b1, b2, eps, bc1, bc2)


def sgd_update(p, g, active, lr):
    if HAVE_NUMBA:
        _nb_sgd_update(p.reshape(-1), g.reshape(-1), active.reshape(-1), lr)
    else:
        _np_sgd_update(p, g, active, lr)


def count_flips(a, b):
    """Number of positions where two equally shaped arrays differ."""
    a = np.ascontiguousarray(a).reshape(-1)
    b = np.ascontiguousarray(b).reshape(-1)
    if HAVE_NUMBA:
        return int(_nb_count_flips(a, b))
    return _np_count_flips(a, b)
