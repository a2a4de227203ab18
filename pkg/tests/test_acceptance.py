"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line; the lines are repeated in
the pytest terminal summary. The toy and MNIST runs are cached per session so
criteria that share a run do not train it twice.
"""
import time
from functools import lru_cache
from pathlib import Path

import numpy as np

from dgm import expansion as X
from dgm import masks as M
from dgm import tensor as T
from dgm.config import load_config
from dgm.gan import Discriminator, Generator, discriminator_loss, generator_loss
from dgm.layers import LayerSlot
from dgm.trainer import ContinualTrainer, current_task_bias, joint_train_baseline, run_stream
from conftest import ACCEPTANCE
from oracles import central_difference, relative_error

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


@lru_cache(maxsize=None)
def toy_run(*overrides):
    start = time.perf_counter()
    trainer = run_stream(load_config(CONFIGS / "toy.cfg", overrides))
    return trainer, time.perf_counter() - start


@lru_cache(maxsize=None)
def mnist_runs():
    cfg = load_config(CONFIGS / "mnist.cfg")
    start = time.perf_counter()
    with_replay = run_stream(cfg)
    without = run_stream(load_config(CONFIGS / "mnist.cfg", ["replay.enabled=false"]))
    jt = joint_train_baseline(cfg, with_replay.stream)
    return with_replay, without, jt, time.perf_counter() - start


# ------------------------------------------------------------ exact properties

def _freeze_run():
    cfg = load_config(CONFIGS / "toy.cfg", ["model.variant=w", "data.num_tasks=3", "schedule.epochs=3",
                                            "schedule.steps_per_epoch=60"])
    tr = ContinualTrainer(cfg)
    start = time.perf_counter()
    tr.train_task(1)
    gen = tr.mem.gen
    masks = [(layer.cum.copy(), layer.cum_bias.copy()) for layer in gen.layers]
    kept = [(layer.W.data[m].copy(), layer.b.data[mb].copy()) for layer, (m, mb) in zip(gen.layers, masks)]
    z = np.random.default_rng(11).standard_normal((256, gen.z_dim))
    labels = [gen.task_labels[1][i % 2] for i in range(256)]
    replay = gen.frozen_forward(z, labels, 1)
    tr.train_task(2)
    tr.train_task(3)
    changed = 0
    for layer, (m, mb), (w, b) in zip(gen.layers, masks, kept):
        changed += int(np.count_nonzero(layer.W.data[:m.shape[0], :m.shape[1]][m] != w))
        changed += int(np.count_nonzero(layer.b.data[:mb.shape[0]][mb] != b))
    reserved = sum(int(m.sum() + mb.sum()) for m, mb in masks)
    return changed, reserved, replay, gen.frozen_forward(z, labels, 1), time.perf_counter() - start


_FREEZE = {}


def freeze_run():
    if not _FREEZE:
        _FREEZE["result"] = _freeze_run()
    return _FREEZE["result"]


def test_freeze_exactness():
    changed, reserved, _, _, secs = freeze_run()
    verdict("freeze exactness", changed == 0 and reserved > 0 and secs < 300,
            f"{reserved} weights reserved after task 1, {changed} changed by task 3 ({secs:.0f} s)")


def test_replay_stability():
    _, _, before, after, _ = freeze_run()
    same = np.array_equal(before, after)
    verdict("replay stability", same, f"{before.shape[0]} task-1 samples bit-identical: {same}")


def test_expansion_arithmetic():
    rng = np.random.default_rng(0)
    bad = []
    for _ in range(200):
        n, p, delta = (int(v) for v in rng.integers(1, 65, size=3))
        for variant in ("a", "w"):
            d = min(delta, p) if variant == "a" else min(delta, n * p)
            layer = LayerSlot(n, p, variant, rng)
            flat = layer.cum.reshape(-1).copy()
            flat[rng.choice(flat.size, size=d, replace=False)] = True
            layer.cum = flat.reshape(layer.cum.shape)
            X.expand(layer, d, rng)
            want = p if variant == "a" else n * p + ((n - d % n) % n)
            if layer.free_capacity() != want:
                bad.append((variant, n, p, d, layer.free_capacity(), want))
    verdict("expansion arithmetic", not bad, f"400 grown layers, mismatches {bad[:3]}")


def test_regularizer():
    rng = np.random.default_rng(1)
    values = []
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 9, size=2))
        prev = (rng.random(shape) < rng.random()).astype(float)
        if prev.all():
            prev.flat[0] = 0.0
        values.append(M.regularizer([rng.random(shape)], [prev]))
    hand = M.regularizer([np.array([[1.0, 0.8, 0.2, 0.0]])], [np.array([[1.0, 0.0, 0.0, 0.0]])])
    ok = min(values) >= 0 and max(values) <= 1 and abs(hand - 1 / 3) <= 1e-12
    verdict("regularizer", ok, f"1000 pairs in [{min(values):.3f}, {max(values):.3f}], hand case {hand!r}")


def test_annealing_endpoints():
    worst = 0.0
    for s_max, epochs, batches in ((200.0, 10, 100), (400.0, 7, 33), (50.0, 2, 2)):
        sched = M.AnnealSchedule(s_max, epochs, batches, "w")
        checks = [(sched.epoch_max(1), 1 / s_max), (sched.epoch_max(epochs), s_max),
                  (sched.scale_at(epochs, batches), s_max)]
        for i in range(1, epochs + 1):
            peak = sched.epoch_max(i)
            checks += [(sched.scale_at(i, 1), 1 / peak), (sched.scale_at(i, batches), peak)]
        worst = max(worst, max(abs(a - b) for a, b in checks))
    verdict("annealing endpoints", worst <= 1e-12, f"max endpoint error {worst:.1e}")


# ------------------------------------------------------------ gradient oracle

def _critic_trial(rng):
    depth = int(rng.integers(0, 3))
    hidden = tuple(int(v) for v in rng.integers(2, 17, size=depth))
    d_in, k, n = int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
    disc = Discriminator(d_in, hidden, rng)
    disc.grow_classes(k, rng)
    xr, xf = rng.standard_normal((n, d_in)), rng.standard_normal((n, d_in))
    yr = rng.integers(1, k, n)
    replay = [(1, rng.standard_normal((n, d_in)), np.zeros(n, int))]
    gp_seed = int(rng.integers(2**31))

    def loss():
        total, _ = discriminator_loss(disc, xr, yr, xf, replay, 2, 10.0, np.random.default_rng(gp_seed))
        return total
    params = disc.parameters()
    analytic = T.grad(loss(), params)
    numeric = central_difference(lambda: loss().item(), [p.data for p in params])
    return max(relative_error(a.data, b) for a, b in zip(analytic, numeric))


def _generator_trial(rng):
    variant = "aw"[int(rng.integers(2))]
    depth = int(rng.integers(1, 3))
    hidden = tuple(int(v) for v in rng.integers(2, 17, size=depth))
    gen = Generator(int(rng.integers(1, 5)), 3, hidden, 2, variant, rng, out_activation="tanh")
    gen.begin_task(1, [0, 1, 2], rng)
    for layer in gen.layers:
        for e in layer.mask_parameters():
            e.data = rng.standard_normal(e.shape) * 0.5
        layer.cum = rng.random(layer.cum.shape) < 0.3
    disc = Discriminator(2, (8,), rng)
    disc.grow_classes(3, rng)
    z = rng.standard_normal((5, gen.z_dim))
    y = rng.integers(0, 3, 5)
    s = float(rng.uniform(0.5, 4.0))
    cum = []
    for layer in gen.layers:
        cum.append(layer.cum)
        if variant == "w":
            cum.append(layer.cum_bias[None, :])

    def loss():
        x, soft = gen.forward(z, y, s)
        return generator_loss(disc, x, y, soft, cum, 1.5, 2.0)[0]
    params = gen.parameters() + gen.mask_parameters()
    analytic = T.grad(loss(), params)
    numeric = central_difference(lambda: loss().item(), [p.data for p in params])
    return max(relative_error(a.data, b) for a, b in zip(analytic, numeric))


def test_gradient_oracle():
    rng = np.random.default_rng(2024)
    errors = [_critic_trial(rng) for _ in range(60)] + [_generator_trial(rng) for _ in range(60)]
    worst = max(errors)
    verdict("gradient oracle", worst <= 1e-5,
            f"{len(errors)} trials (60 critic losses with gradient penalty, 60 masked generator losses), "
            f"max relative error {worst:.1e}")


# ------------------------------------------------------------ toy-stream ablations

def test_forgetting_ablation():
    full, t_full = toy_run()
    off, t_off = toy_run("replay.enabled=false")
    final = full.ledger.accuracy[5]
    t1_after = off.ledger.task_accuracy[1][1]
    t1_final = off.ledger.task_accuracy[5][1]
    ratio = t1_final / t1_after if t1_after else 0.0
    secs = t_full + t_off
    verdict("forgetting ablation", final >= 0.90 and ratio <= 0.30 and secs < 600,
            f"replay final A={final:.3f}; replay off task-1 {t1_after:.3f} -> {t1_final:.3f} "
            f"({ratio:.0%} kept); {secs:.0f} s")


def test_no_expansion_ablation():
    full, _ = toy_run()
    fixed, _ = toy_run("expansion.enabled=false")
    gap = full.ledger.accuracy[5] - fixed.ledger.accuracy[5]
    verdict("no-expansion ablation", gap >= 0.10,
            f"final A {full.ledger.accuracy[5]:.3f} with expansion vs {fixed.ledger.accuracy[5]:.3f} "
            f"without (gap {100 * gap:.1f} points)")


def test_confusion_structure():
    off, _ = toy_run("replay.enabled=false")
    shares = {t: current_task_bias(cm, off.stream.task(t).labels) for t, cm in off.ledger.confusion.items()}
    verdict("confusion structure", min(shares.values()) >= 0.70,
            "share of misclassified mass in current-task columns per checkpoint "
            + ", ".join(f"t{t}={v:.2f}" for t, v in shares.items()))


def test_growth_monotonicity():
    full, _ = toy_run()
    sizes = [full.ledger.network_size[t] for t in range(1, 6)]
    # a slightly larger generator trained progressively longer on each task
    grown, _ = toy_run("model.g_hidden=16,16", "schedule.epochs=3", "schedule.epochs_growth=1.3")
    deltas = grown.ledger.deltas()
    tail = [deltas[t] for t in (3, 4, 5)]
    ok = all(a <= b for a, b in zip(sizes, sizes[1:])) and all(a >= b for a, b in zip(tail, tail[1:]))
    verdict("growth monotonicity", ok, f"network size {sizes}; with epoch growth delta_3..5 = {tail}")


# ------------------------------------------------------------ split MNIST

def test_desk_scale_split_mnist():
    with_replay, without, jt, secs = mnist_runs()
    a_replay, a_off = with_replay.ledger.accuracy[10], without.ledger.accuracy[10]
    ok = a_replay >= 0.75 and a_off <= 0.25 and jt > a_replay and secs <= 3600
    verdict("desk-scale split-MNIST", ok,
            f"A_10 {a_replay:.3f} with replay, {a_off:.3f} without, joint training {jt:.3f}; {secs / 60:.1f} min")
