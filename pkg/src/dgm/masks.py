"""Learnable plasticity masks: annealed sigmoid thresholding, gating, sparsity.

Two variants share this code. ``"a"`` masks activations (one embedding per
output neuron, shape ``1 x p``) and ``"w"`` masks weights (one embedding per
connection, shape ``n x p``).
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T

log = logging.getLogger(__name__)

VARIANTS = ("a", "w")


def check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}; expected 'a' (activations) or 'w' (weights)")
    return variant


@dataclass(frozen=True)
class AnnealSchedule:
    s_max: float
    epochs: int
    batches: int
    variant: str = "w"

    def __post_init__(self):
        if not self.s_max > 1:
            raise ValueError(f"s_max must exceed 1, got {self.s_max}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batches < 1:
            raise ValueError(f"batches must be >= 1, got {self.batches}")
        check_variant(self.variant)

    def epoch_max(self, i):
        """Global annealing: the peak scale reached during epoch ``i``."""
        if not 1 <= i <= self.epochs:
            raise IndexError(f"epoch index {i} outside 1..{self.epochs}")
        if self.epochs == 1:
            return float(self.s_max)
        lo = 1.0 / self.s_max
        return lo + (self.s_max - lo) * (i - 1) / (self.epochs - 1)

    def scale_at(self, i, b):
        smax_i = self.epoch_max(i)
        if not 1 <= b <= self.batches:
            raise IndexError(f"batch index {b} outside 1..{self.batches}")
        if self.variant == "a" or self.batches == 1:
            return smax_i
        # verbatim local sweep; runs downward while smax_i < 1
        lo = 1.0 / smax_i
        return lo + (smax_i - lo) * (b - 1) / (self.batches - 1)


def scale_at(sched, i, b):
    return sched.scale_at(i, b)


def mask_values(e, s):
    """Soft mask ``sigmoid(s * e)``; differentiable when ``e`` is a Tensor."""
    if s <= 0:
        raise ValueError(f"mask scale must be positive, got {s}")
    if isinstance(e, T.Tensor):
        return T.sigmoid(T.mul(e, s))
    return _kernels.sigmoid(np.asarray(e, dtype=np.float64) * s)


def apply_mask(x, W, b, m, variant, activation="identity", m_bias=None):
    """Masked fully connected layer.

    ``"a"``: ``act(x @ W + b) * m`` with ``m`` of shape ``(1, p)``. Masking the
    activation also silences the bias of a dropped neuron.
    ``"w"``: ``act(x @ (m * W) + m_bias * b)`` with ``m`` shaped like ``W``;
    ``m_bias`` defaults to ones.
    """
    check_variant(variant)
    x, W, b, m = (T.as_tensor(v) for v in (x, W, b, m))
    act = T.ACTIVATIONS[activation]
    n, p = W.shape
    if variant == "a":
        if m.shape not in ((1, p), (p,)):
            raise ValueError(f"activation mask shape {m.shape} does not match layer width {p} of weight {W.shape}")
        return T.mul(act(T.dense(x, W, b)), m)
    if m.shape != W.shape:
        raise ValueError(f"weight mask shape {m.shape} does not match weight shape {W.shape}")
    bias = b if m_bias is None else T.mul(T.as_tensor(m_bias), b)
    return act(T.dense(x, T.mul(m, W), bias))


def gate_gradient(g, m_cum):
    """``(1 - m_cum) * g``; an activation mask broadcasts over the input rows."""
    g = np.asarray(g)
    m_cum = np.asarray(m_cum, dtype=g.dtype)
    if m_cum.shape != g.shape:
        ok = m_cum.ndim == 2 and m_cum.shape[0] == 1 and g.ndim == 2 and m_cum.shape[1] == g.shape[1]
        if not ok:
            raise ValueError(f"gate shape {m_cum.shape} incompatible with gradient shape {g.shape}")
    return (1.0 - m_cum) * g


def regularizer(m_t, m_prev):
    """Reuse-aware sparsity penalty over all masked layers.

    Sum of current mask values on previously free entries, divided by the
    number of previously free entries. Entries already reserved cost nothing.
    Returns a Tensor when any current mask is a Tensor; 0 when nothing is free.
    """
    if len(m_t) != len(m_prev):
        raise ValueError("regularizer needs one previous mask per layer")
    num = 0.0
    den = 0.0
    for cur, prev in zip(m_t, m_prev):
        prev = np.asarray(prev, dtype=np.float64)
        if cur.shape != prev.shape:
            raise ValueError(f"mask shape {cur.shape} != cumulated mask shape {prev.shape}")
        free = 1.0 - prev
        den += float(free.sum())
        term = T.tsum(T.mul(cur, free)) if isinstance(cur, T.Tensor) else float(np.sum(cur * free))
        num = T.add(num, term) if isinstance(term, T.Tensor) or isinstance(num, T.Tensor) else num + term
    if den == 0:
        log.warning("capacity exhausted: every masked unit is reserved; sparsity penalty is 0")
        return T.mul(num, 0.0) if isinstance(num, T.Tensor) else 0.0
    if isinstance(num, T.Tensor):
        return T.mul(num, 1.0 / den)
    return num / den


def binarize(e):
    """Binary mask from embeddings: positive entries are reserved, ties free."""
    return np.asarray(e) > 0


def occupation(cum_masks):
    """Per-layer reserved fraction and the total count of free entries."""
    fractions = []
    free = 0
    for cum in cum_masks:
        cum = np.asarray(cum, dtype=bool)
        used = int(np.count_nonzero(cum))
        fractions.append(used / cum.size if cum.size else 0.0)
        free += cum.size - used
    return fractions, free


def capacity_ratio(total_size, free_size):
    """Weight multiplier for the sparsity penalty: network size over free size."""
    if free_size <= 0:
        return float(total_size)
    return total_size / free_size


def sigmoid_slope(e, s):
    """d sigmoid(s e) / d e, used by gradient checks."""
    m = _kernels.sigmoid(np.asarray(e, dtype=np.float64) * s)
    return s * m * (1.0 - m)


def clamp_gradient(g, limit):
    if limit is None or not math.isfinite(limit):
        return g
    return np.clip(g, -limit, limit)
