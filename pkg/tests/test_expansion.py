import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dgm import expansion as X
from dgm.layers import LayerSlot


def _layer(n, p, variant, seed=0):
    return LayerSlot(n, p, variant, np.random.default_rng(seed))


def _reserve(layer, count, rng):
    """Mark ``count`` random free entries of the layer as reserved by a task."""
    free = np.flatnonzero(~layer.cum.reshape(-1))
    pick = rng.choice(free, size=count, replace=False)
    flat = layer.cum.reshape(-1).copy()
    flat[pick] = True
    layer.cum = flat.reshape(layer.cum.shape)


# ------------------------------------------------------------ counting

def test_reserved_delta_examples():
    assert X.reserved_delta([0, 1, 0], [0, 1, 0]) == 0
    assert X.reserved_delta([0, 0, 1], [1, 0, 1]) == 1
    before = np.zeros((4, 4), bool)
    after = before.copy()
    after.flat[[0, 3, 5, 6, 10, 15]] = True
    assert X.reserved_delta(before, after) == 6


def test_reserved_delta_rejects_non_monotone_and_mismatched_masks():
    with pytest.raises(ValueError, match="monotone"):
        X.reserved_delta([1, 0], [0, 1])
    with pytest.raises(ValueError, match="shapes"):
        X.reserved_delta([1, 0], [1, 0, 0])


def test_negative_delta_rejected():
    with pytest.raises(ValueError):
        X.neurons_for_dgma(-1)
    with pytest.raises(ValueError):
        X.neurons_for_dgmw(-1, 4)


# ------------------------------------------------------------ activation-mask growth

def test_dgma_examples():
    rng = np.random.default_rng(0)
    layer = _layer(10, 64, "a")
    _reserve(layer, 20, rng)
    X.expand_dgma(layer, 20, rng, task=1)
    assert layer.p == 84 and layer.free_capacity() == 64

    layer = _layer(10, 64, "a")
    widths = []
    for t, delta in enumerate((5, 7), start=1):
        _reserve(layer, delta, rng)
        X.expand_dgma(layer, delta, rng, task=t)
        widths.append(layer.p)
        assert layer.free_capacity() == 64
    assert widths == [69, 76]
    assert layer.growth_log == [(1, 5, 5), (2, 7, 7)]


def test_zero_delta_leaves_layer_unchanged():
    for variant in ("a", "w"):
        layer = _layer(4, 3, variant)
        W = layer.W.data.copy()
        X.expand(layer, 0, np.random.default_rng(1))
        np.testing.assert_array_equal(layer.W.data, W)


def test_free_capacity_examples():
    assert _layer(10, 84, "a").free_capacity() == 84
    layer = _layer(10, 84, "a")
    _reserve(layer, 20, np.random.default_rng(0))
    assert layer.free_capacity() == 64
    layer.cum[:] = True
    assert layer.free_capacity() == 0


# ------------------------------------------------------------ weight-mask growth

def test_dgmw_examples():
    rng = np.random.default_rng(0)
    layer = _layer(4, 3, "w")
    _reserve(layer, 6, rng)
    assert X.expand_dgmw(layer, 6, rng) == 2
    assert layer.p == 5 and layer.free_capacity() == 14 == 4 * 3 + 2

    layer = _layer(4, 3, "w")
    _reserve(layer, 8, rng)
    assert X.expand_dgmw(layer, 8, rng) == 2
    assert layer.free_capacity() == 12


@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64))
def test_dgmw_free_weight_identity(n, p, delta):
    delta = min(delta, n * p)
    expected = n * p + ((n - delta % n) % n)
    assert X.free_after_dgmw(n, p, delta) == expected
    layer = _layer(n, p, "w")
    rng = np.random.default_rng(n * 4096 + p * 64 + delta)
    _reserve(layer, delta, rng)
    X.expand_dgmw(layer, delta, rng)
    assert layer.free_capacity() == expected
    assert layer.base_free <= layer.free_capacity() <= layer.base_free + n - 1


@given(st.integers(1, 64), st.integers(1, 64))
def test_dgma_free_neurons_return_to_base(p, delta):
    delta = min(delta, p)
    layer = _layer(3, p, "a")
    rng = np.random.default_rng(p * 64 + delta)
    _reserve(layer, delta, rng)
    X.expand_dgma(layer, delta, rng)
    assert layer.free_capacity() == p == layer.base_free


def test_variant_mismatch_rejected():
    with pytest.raises(ValueError):
        X.expand_dgma(_layer(2, 2, "w"), 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        X.expand_dgmw(_layer(2, 2, "a"), 1, np.random.default_rng(0))


# ------------------------------------------------------------ growth preserves old state

@pytest.mark.parametrize("variant", ["a", "w"])
def test_growth_keeps_old_block_and_snapshots(variant):
    rng = np.random.default_rng(3)
    layer, consumer = _layer(4, 5, variant, 1), _layer(5, 3, variant, 2)
    for lyr in (layer, consumer):
        lyr.begin_task(1)
        lyr.embedding.data = rng.standard_normal(lyr.embedding.shape)
        if lyr.bias_embedding is not None:
            lyr.bias_embedding.data = rng.standard_normal(lyr.bias_embedding.shape)
    deltas = [lyr.reserve(1) for lyr in (layer, consumer)]
    W_old, Wc_old = layer.W.data.copy(), consumer.W.data.copy()
    snap_old = layer.snapshots[1][0].copy()
    added = X.expand(layer, deltas[0], rng, consumer=consumer, task=1)
    assert layer.p == 5 + added and consumer.n == 5 + added
    np.testing.assert_array_equal(layer.W.data[:, :5], W_old)
    np.testing.assert_array_equal(consumer.W.data[:5], Wc_old)
    assert np.all(layer.b.data[5:] == 0)
    m = layer.snapshots[1][0]
    np.testing.assert_array_equal(m[:, :5], snap_old)
    assert not m[:, 5:].any() and not layer.cum[:, 5:].any()
    assert layer.cum.shape == layer.mask_shape and consumer.cum.shape == consumer.mask_shape


def test_new_weights_are_fan_scaled():
    rng = np.random.default_rng(4)
    layer = _layer(30, 10, "a")
    layer.add_outputs(20, rng)
    limit = np.sqrt(6.0 / (30 + 30))
    assert np.all(np.abs(layer.W.data[:, 10:]) <= limit)
