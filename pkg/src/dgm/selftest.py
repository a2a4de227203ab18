"""Fast invariant checks behind ``dgm selftest``.

Each check returns ``(ok, detail)``. ``run_all`` runs them in a fixed order
and reports which properties failed. The ``gate-bypass`` fault disables
gradient gating so the freeze check has something to catch.
"""
from contextlib import contextmanager

import numpy as np

from . import expansion as X
from . import masks as M
from . import tensor as T
from .config import RunConfig
from .gan import Discriminator, Generator, gradient_penalty
from .trainer import ContinualTrainer

FAULTS = ("gate-bypass",)


def _fd_check(f, params, rng, h=1e-6, rtol=1e-5, probes=4):
    """Compare ``grad(f)`` with central differences on a few random entries."""
    grads = T.grad(f(), params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        for k in rng.choice(flat.size, size=min(probes, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + h
            up = f().item()
            flat[k] = old - h
            down = f().item()
            flat[k] = old
            num = (up - down) / (2 * h)
            ana = g.data.reshape(-1)[k]
            err = abs(num - ana) / max(1.0, abs(num), abs(ana))
            worst = max(worst, err)
    return worst <= rtol, worst


def check_gradients(seed=0, trials=10):
    """Critic loss with the gradient penalty, differentiated end to end."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        disc = Discriminator(3, (8, 8), rng)
        disc.grow_classes(3, rng)
        x_real = rng.standard_normal((4, 3))
        x_fake = rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        gp_seed = int(rng.integers(2**31))

        def loss():
            adv, logits = disc(T.Tensor(x_real))
            # same interpolation points on every evaluation
            gp = gradient_penalty(disc, x_real, x_fake, np.random.default_rng(gp_seed))
            return T.add(T.add(T.mean(adv), T.cross_entropy(logits, y)), gp)
        ok, err = _fd_check(loss, disc.parameters(), rng)
        worst = max(worst, err)
        if not ok:
            return False, f"relative error {err:.2e} exceeds 1e-5"
    return True, f"max relative error {worst:.2e}"


def _tiny_config(seed):
    cfg = RunConfig(seed=seed)
    cfg.model.variant = "w"
    cfg.model.g_hidden = (6, 6)
    cfg.model.d_hidden = (8,)
    cfg.model.z_dim = 2
    cfg.data.num_tasks = 3
    cfg.data.samples_per_class = 20
    cfg.schedule.epochs = 2
    cfg.schedule.steps_per_epoch = 3
    cfg.schedule.batch_size = 8
    cfg.losses.n_critic = 1
    cfg.masks.lr_embedding = 0.05
    return cfg


def check_freeze(seed=0):
    """Reserved generator weights and task-1 replay survive two more tasks."""
    tr = ContinualTrainer(_tiny_config(seed))
    tr.train_task(1)
    gen = tr.mem.gen
    masks = [(layer.cum.copy(), layer.cum_bias.copy()) for layer in gen.layers]
    before = [(layer.W.data[m].copy(), layer.b.data[mb].copy()) for layer, (m, mb) in zip(gen.layers, masks)]
    z = np.random.default_rng(seed + 1).standard_normal((16, gen.z_dim))
    labels = [gen.task_labels[1][i % len(gen.task_labels[1])] for i in range(16)]
    replay_before = gen.frozen_forward(z, labels, 1)
    tr.train_task(2)
    tr.train_task(3)
    changed = 0
    for layer, (m, mb), (w, b) in zip(gen.layers, masks, before):
        # growth appends rows and columns, so the old block keeps its indices
        changed += int(np.count_nonzero(layer.W.data[:m.shape[0], :m.shape[1]][m] != w))
        changed += int(np.count_nonzero(layer.b.data[:mb.shape[0]][mb] != b))
    replay_after = gen.frozen_forward(z, labels, 1)
    if changed:
        return False, f"{changed} reserved generator entries changed"
    if not np.array_equal(replay_before, replay_after):
        return False, "task-1 replay samples changed"
    reserved = sum(int(m.sum()) for m, _ in masks)
    if reserved == 0:
        return False, "task 1 reserved nothing, freeze not exercised"
    return True, f"{reserved} reserved weights bit-identical"


def check_expansion(seed=0, trials=500):
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n, p, delta = (int(v) for v in rng.integers(1, 65, size=3))
        expected = n * p + ((n - delta % n) % n)
        got = X.free_after_dgmw(n, p, delta)
        if got != expected:
            return False, f"n={n} p={p} delta={delta}: free {got} != {expected}"
        if X.neurons_for_dgma(min(delta, p)) != min(delta, p):
            return False, f"activation variant adds {X.neurons_for_dgma(min(delta, p))} for delta={delta}"
    return True, f"{trials} random (n, p, delta) cases"


def check_regularizer(seed=0, trials=1000):
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        m = rng.random(shape)
        prev = rng.random(shape) < 0.5
        with np.errstate(all="ignore"):
            r = float(M.regularizer([m], [prev.astype(float)]))
        if not 0.0 <= r <= 1.0:
            return False, f"R={r} outside [0, 1]"
    r = float(M.regularizer([np.array([[1.0, 0.8, 0.2, 0.0]])], [np.array([[1.0, 0.0, 0.0, 0.0]])]))
    if abs(r - 1 / 3) > 1e-12:
        return False, f"hand case gives {r!r}, expected 1/3"
    return True, f"{trials} random pairs in [0, 1]; hand case {r:.15f}"


CHECKS = (
    ("gradient-check", check_gradients),
    ("freeze-exactness", check_freeze),
    ("expansion-arithmetic", check_expansion),
    ("regularizer-bounds", check_regularizer),
)


@contextmanager
def inject(fault):
    """Temporarily break an invariant on purpose."""
    if fault is None:
        yield
        return
    if fault != "gate-bypass":
        raise ValueError(f"unknown fault {fault!r}; known: {', '.join(FAULTS)}")
    original = Generator.set_gates
    Generator.set_gates = lambda self, s, use_current=True: None
    try:
        yield
    finally:
        Generator.set_gates = original


def run_all(fault=None, seed=0):
    results = []
    with inject(fault):
        for name, check in CHECKS:
            try:
                ok, detail = check(seed=seed)
            except Exception as exc:  # a crash is a failed property, not a usage error
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append((name, ok, detail))
    return results
