"""Independent reference computations shared by the tests."""
import numpy as np


def central_difference(f, arrays, eps=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to each array, by
    perturbing entries in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = f()
            flat[k] = old - eps
            down = f()
            flat[k] = old
            gflat[k] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, b, floor=1e-3):
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps entries that are zero up to rounding from dividing by ~0;
    below it the comparison is absolute at ``1e-5 * floor``.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def sigmoid(x):
    """Textbook logistic; relatively accurate for |x| < 700."""
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))
