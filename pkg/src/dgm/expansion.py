"""Post-task growth that restores each generator layer's free capacity."""
import math

import numpy as np


def reserved_delta(cum_before, cum_after):
    """Number of entries that became reserved between two cumulated masks."""
    before = np.asarray(cum_before, dtype=bool)
    after = np.asarray(cum_after, dtype=bool)
    if before.shape != after.shape:
        raise ValueError(f"mask shapes differ: {before.shape} vs {after.shape}")
    if np.any(before & ~after):
        raise ValueError("cumulated mask lost a reservation; masks must be monotone")
    return int(np.count_nonzero(after & ~before))


def neurons_for_dgma(delta):
    if delta < 0:
        raise ValueError(f"reserved count must be non-negative, got {delta}")
    return int(delta)


def neurons_for_dgmw(delta, n):
    """Output neurons to add so that ``n * added >= delta`` (rounded up)."""
    if delta < 0:
        raise ValueError(f"reserved count must be non-negative, got {delta}")
    if n <= 0:
        raise ValueError(f"input width must be positive, got {n}")
    return int(math.ceil(delta / n))


def free_capacity(layer):
    """Free neurons (activation masks) or free weights (weight masks)."""
    return layer.free_capacity()


def expand_dgma(layer, delta, rng, consumer=None, task=None):
    """Grow an activation-masked layer by ``delta`` neurons."""
    if layer.variant != "a":
        raise ValueError("expand_dgma needs an activation-masked layer")
    k = neurons_for_dgma(delta)
    return _grow(layer, k, delta, rng, consumer, task)


def expand_dgmw(layer, delta, rng, consumer=None, task=None):
    """Grow a weight-masked layer by ``ceil(delta / n)`` neurons."""
    if layer.variant != "w":
        raise ValueError("expand_dgmw needs a weight-masked layer")
    k = neurons_for_dgmw(delta, layer.n)
    return _grow(layer, k, delta, rng, consumer, task)


def expand(layer, delta, rng, consumer=None, task=None):
    if layer.variant == "a":
        return expand_dgma(layer, delta, rng, consumer, task)
    return expand_dgmw(layer, delta, rng, consumer, task)


def _grow(layer, k, delta, rng, consumer, task):
    layer.add_outputs(k, rng)
    if consumer is not None:
        consumer.add_inputs(k, rng)
    layer.growth_log.append((task, int(delta), int(k)))
    return k


def free_after_dgmw(n, p, delta):
    """Free weights of an ``n x p`` layer after reserving ``delta`` weights
    and growing by ``ceil(delta / n)`` neurons."""
    return (p + neurons_for_dgmw(delta, n)) * n - delta
