"""Masked generator layers and their per-task mask bookkeeping."""
import numpy as np

from . import _kernels
from . import masks as M
from . import tensor as T


def glorot_uniform(rng, n, p, dtype=np.float64):
    limit = np.sqrt(6.0 / (n + p))
    return rng.uniform(-limit, limit, size=(n, p)).astype(dtype)


def np_activation(name, x):
    if name == "leaky_relu":
        return _kernels.leaky_relu(x, T.LEAKY_SLOPE)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return _kernels.sigmoid(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


class LayerSlot:
    """A fully connected generator layer that carries plasticity masks.

    State per layer:

    * ``W`` (n x p) and ``b`` (p) -- shared across tasks
    * ``embedding`` -- mask embeddings of the task being learned
      (``1 x p`` for activation masks, ``n x p`` for weight masks); weight
      masks also get ``bias_embedding`` (``1 x p``) so a neuron whose
      connections are all dropped outputs exactly zero
    * ``cum`` / ``cum_bias`` -- cumulated binary masks of finished tasks
    * ``snapshots`` -- binary masks per finished task, used for replay
    """

    def __init__(self, n, p, variant, rng, activation="leaky_relu", name="layer", dtype=np.float64):
        self.variant = M.check_variant(variant)
        self.activation = activation
        self.name = name
        self.dtype = dtype
        self.W = T.Parameter(glorot_uniform(rng, n, p, dtype), name=f"{name}.W")
        self.b = T.Parameter(np.zeros(p, dtype=dtype), name=f"{name}.b")
        self.cum = np.zeros(self.mask_shape, dtype=bool)
        self.cum_bias = np.zeros(p, dtype=bool)
        self.snapshots = {}
        self.embedding = None
        self.bias_embedding = None
        self.base_free = self.capacity_size()
        self.growth_log = []

    # -------------------------------------------------------------- shapes

    @property
    def n(self):
        return self.W.data.shape[0]

    @property
    def p(self):
        return self.W.data.shape[1]

    @property
    def mask_shape(self):
        return (1, self.p) if self.variant == "a" else (self.n, self.p)

    def capacity_size(self):
        """Units counted as capacity: neurons (activation masks) or weights."""
        return self.p if self.variant == "a" else self.n * self.p

    def free_capacity(self):
        return self.capacity_size() - int(np.count_nonzero(self.cum))

    def parameters(self):
        return [self.W, self.b]

    def mask_parameters(self):
        out = [self.embedding] if self.embedding is not None else []
        if self.bias_embedding is not None:
            out.append(self.bias_embedding)
        return out

    # -------------------------------------------------------------- task lifecycle

    def begin_task(self, task):
        self.task = task
        self.embedding = T.Parameter(np.zeros(self.mask_shape, dtype=self.dtype), name=f"{self.name}.e{task}")
        if self.variant == "w":
            self.bias_embedding = T.Parameter(np.zeros((1, self.p), dtype=self.dtype),
                                              name=f"{self.name}.eb{task}")

    def soft_masks(self, s):
        m = M.mask_values(self.embedding, s)
        mb = M.mask_values(self.bias_embedding, s) if self.bias_embedding is not None else None
        return m, mb

    def current_binary(self):
        m = M.binarize(self.embedding.data)
        mb = M.binarize(self.bias_embedding.data[0]) if self.bias_embedding is not None else None
        return m, mb

    def forward(self, x, s):
        """Training forward pass under the soft mask of the current task."""
        m, mb = self.soft_masks(s)
        if self.variant == "a":
            return M.apply_mask(x, self.W, self.b, m, "a", self.activation)
        return M.apply_mask(x, self.W, self.b, m, "w", self.activation,
                            m_bias=T.reshape(mb, (self.p,)))

    def set_gates(self, s, use_current=True):
        """Gradient gates ``1 - max(current soft mask, cumulated mask)``."""
        cum = self.cum.astype(self.dtype)
        if use_current:
            cur = M.mask_values(self.embedding.data, s).astype(self.dtype)
            cum = np.maximum(cur, cum)
        if self.variant == "a":
            self.W.gate = 1.0 - cum
            self.b.gate = 1.0 - cum[0]
        else:
            self.W.gate = 1.0 - cum
            cb = self.cum_bias.astype(self.dtype)
            if use_current:
                cb = np.maximum(M.mask_values(self.bias_embedding.data[0], s).astype(self.dtype), cb)
            self.b.gate = 1.0 - cb

    def reserve(self, task):
        """Binarize the current embeddings, store the snapshot, and fold it
        into the cumulated mask. Returns the number of newly reserved units."""
        m, mb = self.current_binary()
        before = self.cum.copy()
        self.snapshots[task] = (m.copy(), None if mb is None else mb.copy())
        self.cum = self.cum | m
        if mb is not None:
            self.cum_bias = self.cum_bias | mb
        else:
            self.cum_bias = self.cum[0].copy()
        self.embedding = None
        self.bias_embedding = None
        return int(np.count_nonzero(self.cum & ~before))

    # -------------------------------------------------------------- replay path

    def active_units(self, task):
        """Indices of neurons that can be non-zero under the task's snapshot."""
        m, mb = self.snapshots[task]
        if self.variant == "a":
            return np.flatnonzero(m[0])
        return np.flatnonzero(m.any(axis=0) | mb)

    def frozen_forward(self, h, in_idx, task):
        """Forward pass restricted to the task's active units (numpy only).

        The restriction keeps matrix shapes independent of later growth, so
        the result is reproducible bit for bit after expansion.
        """
        m, mb = self.snapshots[task]
        out_idx = self.active_units(task)
        if self.variant == "a":
            W = self.W.data[np.ix_(in_idx, out_idx)]
            b = self.b.data[out_idx]
        else:
            W = (self.W.data * m)[np.ix_(in_idx, out_idx)]
            b = (self.b.data * mb)[out_idx]
        return np_activation(self.activation, h @ W + b), out_idx

    # -------------------------------------------------------------- growth

    def add_outputs(self, k, rng):
        """Append ``k`` output neurons; new units are free in every mask."""
        if k <= 0:
            return
        n, p = self.n, self.p
        limit = np.sqrt(6.0 / (n + p + k))
        new_cols = rng.uniform(-limit, limit, size=(n, k)).astype(self.dtype)
        self.W.data = np.ascontiguousarray(np.concatenate([self.W.data, new_cols], axis=1))
        self.b.data = np.concatenate([self.b.data, np.zeros(k, dtype=self.dtype)])
        pad = ((0, 0), (0, k))
        self.cum = np.pad(self.cum, pad)
        self.cum_bias = np.pad(self.cum_bias, (0, k))
        for t, (m, mb) in self.snapshots.items():
            self.snapshots[t] = (np.pad(m, pad), None if mb is None else np.pad(mb, (0, k)))

    def add_inputs(self, k, rng):
        """Append ``k`` input rows (the previous layer grew)."""
        if k <= 0:
            return
        n, p = self.n, self.p
        limit = np.sqrt(6.0 / (n + k + p))
        new_rows = rng.uniform(-limit, limit, size=(k, p)).astype(self.dtype)
        self.W.data = np.ascontiguousarray(np.concatenate([self.W.data, new_rows], axis=0))
        if self.variant == "w":
            pad = ((0, k), (0, 0))
            self.cum = np.pad(self.cum, pad)
            for t, (m, mb) in self.snapshots.items():
                self.snapshots[t] = (np.pad(m, pad), mb)
