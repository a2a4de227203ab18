"""Class-incremental training loop, evaluation, and run artifacts."""
import csv
import hashlib
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import _kernels
from . import checkpoint as ckpt
from . import masks as M
from . import tensor as T
from .config import RunConfig, from_dict
from .data import gaussian_tasks, load_mnist, split_incremental
from .gan import Discriminator, GenerativeMemory, Generator
from .optim import Adam

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["task", "epoch", "batch", "L_D", "Ls_D", "Lc_D", "L_gp", "L_G", "Ls_G", "Lc_G", "R", "alpha", "s"]
GROWTH_COLUMNS = ["task", "layer", "delta", "neurons_added", "total_p", "free_capacity"]
OCCUPATION_COLUMNS = ["task", "epoch", "layer", "fraction", "s_value", "flipped_count"]
METRIC_COLUMNS = ["checkpoint", "classes_seen", "scope", "accuracy", "n_test", "network_size"]


def default_data_root():
    here = Path(__file__).resolve().parents[2] / "data" / "mnist5k"
    return os.environ.get("DGM_DATA_DIR", str(here))


def build_stream(cfg):
    d = cfg.data
    if d.source == "gaussian":
        return gaussian_tasks(d.num_tasks, d.classes_per_task, d.samples_per_class, cfg.seed)
    root = d.path or default_data_root()
    train, test = load_mnist(root, downsample=d.downsample)
    classes = sorted(set(train.y.tolist()))
    per = d.classes_per_task
    groups = [classes[i:i + per] for i in range(0, min(len(classes), d.num_tasks * per), per)]
    if d.order_seed >= 0:
        perm = [int(c) for c in np.random.default_rng(d.order_seed).permutation(classes)]
        groups = [perm[i:i + per] for i in range(0, d.num_tasks * per, per)]
    stream = split_incremental(train, test, groups=groups, per_class_cap=d.per_class_cap or None)
    stream.meta.update({"source": "mnist", "root": root, "downsampled": d.downsample})
    return stream


def output_activation(cfg):
    """tanh for pixel data; linear for the low-dimensional toy, where tanh saturates."""
    if cfg.model.g_out != "auto":
        return cfg.model.g_out
    return "tanh" if cfg.data.source == "mnist" else "identity"


def build_memory(cfg, stream, rng):
    dtype = np.dtype(cfg.model.dtype).type
    gen = Generator(cfg.model.z_dim, stream.n_classes, cfg.model.g_hidden, stream.feature_dim,
                    cfg.model.variant, rng, out_activation=output_activation(cfg), dtype=dtype)
    disc = Discriminator(stream.feature_dim, cfg.model.d_hidden, rng, dtype=dtype)
    L = cfg.losses
    return GenerativeMemory(gen, disc, rng, lr_g=L.lr_g, lr_d=L.lr_d, betas=(L.beta1, L.beta2),
                            n_critic=L.n_critic, lambda_gp=L.lambda_gp, lambda_ru=cfg.masks.lambda_ru,
                            gp_point=L.gp_point, batch_size=cfg.schedule.batch_size,
                            replay_batch=cfg.replay.batch_size or None, grad_clamp=cfg.masks.grad_clamp,
                            gate_current=cfg.masks.gate_current, lr_embedding=cfg.masks.lr_embedding or None)


@dataclass
class MetricsLedger:
    accuracy: dict = field(default_factory=dict)
    task_accuracy: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    network_size: dict = field(default_factory=dict)
    metric_rows: list = field(default_factory=list)
    loss_rows: list = field(default_factory=list)
    growth_rows: list = field(default_factory=list)
    occupation_rows: list = field(default_factory=list)
    presented_labels: dict = field(default_factory=dict)

    def deltas(self, layer=None):
        """Total (or one layer's) newly reserved units per task."""
        out = {}
        for row in self.growth_rows:
            if layer is None or row["layer"] == layer:
                out[row["task"]] = out.get(row["task"], 0) + row["delta"]
        return out


def confusion_matrix(y_true, y_pred, k):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def current_task_bias(cm, current_labels):
    """Share of misclassified test samples predicted as a current-task class."""
    off = cm.copy()
    np.fill_diagonal(off, 0)
    total = off.sum()
    if total == 0:
        return 1.0
    return float(off[:, list(current_labels)].sum() / total)


def accuracy_from(x, y, predict, k):
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = predict(x)
    cm = confusion_matrix(y, pred, k)
    return float(np.mean(pred == y)), cm


class ContinualTrainer:
    """Owns the model, the stream and the metrics of one run."""

    def __init__(self, cfg: RunConfig, stream=None, out_dir=None):
        self.cfg = cfg.validate()
        self.rng = np.random.default_rng(cfg.seed)
        self.stream = stream if stream is not None else build_stream(cfg)
        self.mem = build_memory(cfg, self.stream, self.rng)
        self.ledger = MetricsLedger()
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dtype = np.dtype(cfg.model.dtype).type

    # -------------------------------------------------------------- schedule

    def epochs_for(self, t):
        s = self.cfg.schedule
        return max(1, int(round(s.epochs * s.epochs_growth ** (t - 1))))

    def steps_for(self, task):
        s = self.cfg.schedule
        if s.steps_per_epoch:
            return s.steps_per_epoch
        return max(2, math.ceil(len(task.train) / s.batch_size))

    def _sampler(self, task, t):
        x, y = task.train.x.astype(self.dtype), task.train.y
        bs = min(self.cfg.schedule.batch_size, len(y))
        seen = self.ledger.presented_labels.setdefault(t, set())

        def draw():
            idx = self.rng.choice(len(y), size=bs, replace=False)
            seen.update(np.unique(y[idx]).tolist())
            return x[idx], y[idx]
        return draw

    # -------------------------------------------------------------- training

    def train_task(self, t):
        """Train task ``t`` end to end: epochs of alternating updates, mask
        reservation, then expansion."""
        task = self.stream.task(t)
        mem = self.mem
        mem.begin_task(t, task.labels)
        epochs = self.epochs_for(t)
        steps = self.steps_for(task)
        sched = M.AnnealSchedule(self.cfg.masks.s_max, epochs, steps, self.cfg.model.variant)
        sampler = self._sampler(task, t)
        replay = self.cfg.replay.enabled and bool(mem.finished)
        prev_bin = [layer.current_binary()[0] for layer in mem.gen.layers]
        for i in range(1, epochs + 1):
            s = None
            for b in range(1, steps + 1):
                s = sched.scale_at(i, b)
                parts = mem.alternate_step(sampler, s, replay=replay)
                row = {"task": t, "epoch": i, "batch": b}
                row.update({k: parts[k] for k in LOSS_COLUMNS[3:11]})
                row.update({"alpha": parts["alpha"], "s": s})
                self.ledger.loss_rows.append(row)
            for li, layer in enumerate(mem.gen.layers):
                cur = layer.current_binary()[0]
                union = layer.cum | cur
                self.ledger.occupation_rows.append({
                    "task": t, "epoch": i, "layer": li,
                    "fraction": float(np.count_nonzero(union) / union.size),
                    "s_value": s, "flipped_count": _kernels.count_flips(cur, prev_bin[li])})
                prev_bin[li] = cur
            if self.cfg.schedule.eval_every_epoch:
                self.evaluate(t, record=False)
        records = mem.end_task(expand=self.cfg.expansion.enabled)
        for li, delta, added in records:
            layer = mem.gen.layers[li]
            self.ledger.growth_rows.append({"task": t, "layer": li, "delta": delta, "neurons_added": added,
                                            "total_p": layer.p, "free_capacity": layer.free_capacity()})
        if mem.gen.free() == 0:
            log.warning("task %d: generator capacity exhausted (expansion %s)", t,
                        "on" if self.cfg.expansion.enabled else "off")

    def evaluate(self, t, record=True):
        """Single-head accuracy over every class seen up to task ``t``."""
        x, y = self.stream.test_upto(t)
        k = len(self.stream.labels_upto(t))
        predict = lambda xs: self.mem.disc.predict(xs.astype(self.dtype))
        acc, cm = accuracy_from(x, y, predict, k)
        per_task = {}
        for j in range(1, t + 1):
            task = self.stream.task(j)
            per_task[j] = float(np.mean(predict(task.test.x) == task.test.y))
        if record:
            L = self.ledger
            L.accuracy[t] = acc
            L.task_accuracy[t] = per_task
            L.confusion[t] = cm
            L.network_size[t] = int(sum(self.mem.gen.widths()))
            size = L.network_size[t]
            L.metric_rows.append({"checkpoint": t, "classes_seen": k, "scope": "all", "accuracy": acc,
                                  "n_test": len(y), "network_size": size})
            for j, a in per_task.items():
                L.metric_rows.append({"checkpoint": t, "classes_seen": k, "scope": f"task{j}", "accuracy": a,
                                      "n_test": len(self.stream.task(j).test), "network_size": size})
        return acc, per_task, cm

    def run(self):
        try:
            if self.out_dir:
                self.write_manifest()
            for t in range(1, len(self.stream) + 1):
                self.train_task(t)
                self.evaluate(t)
                if self.out_dir:
                    save_checkpoint(self.out_dir / f"checkpoint_t{t}.bin", self)
                    self.flush()
        finally:
            if self.out_dir:
                self.flush()
        return self.ledger

    # -------------------------------------------------------------- artifacts

    def write_manifest(self):
        manifest = {
            "config": self.cfg.to_dict(),
            "versions": {"dgm": __version__, "source_sha256": source_digest(), "numpy": np.__version__,
                         "python": platform.python_version(), "kernel_backend": _kernels.BACKEND},
            "stream": {"tasks": [t.labels for t in self.stream.tasks], "n_classes": self.stream.n_classes,
                       "feature_dim": self.stream.feature_dim,
                       "source": self.stream.meta.get("source"),
                       "downsampled": self.stream.meta.get("downsampled", False)},
        }
        with open(self.out_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=list)

    def flush(self):
        L = self.ledger
        write_csv(self.out_dir / "metrics.csv", METRIC_COLUMNS, L.metric_rows)
        write_csv(self.out_dir / "losses.csv", LOSS_COLUMNS, L.loss_rows)
        write_csv(self.out_dir / "growth.csv", GROWTH_COLUMNS, L.growth_rows)
        write_csv(self.out_dir / "occupation.csv", OCCUPATION_COLUMNS, L.occupation_rows)
        for t, cm in L.confusion.items():
            labels = self.stream.labels_upto(t)
            rows = [dict({"true": labels[i]}, **{f"pred_{labels[j]}": int(cm[i, j]) for j in range(len(labels))})
                    for i in range(len(labels))]
            write_csv(self.out_dir / f"confusion_t{t}.csv", ["true"] + [f"pred_{c}" for c in labels], rows)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def source_digest():
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_stream(cfg, stream=None, out_dir=None):
    """Train and evaluate over every task of the stream."""
    trainer = ContinualTrainer(cfg, stream, out_dir)
    trainer.run()
    return trainer


def train_stream(cfg, stream=None):
    return run_stream(cfg, stream).ledger


def joint_train_baseline(cfg, stream, steps=None, rng=None):
    """Upper bound: the critic trunk and class head trained on all real data
    at once with cross entropy, no incremental constraint."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.model.dtype).type
    x, y = stream.all_train()
    x = x.astype(dtype)
    k = stream.n_classes
    disc = Discriminator(stream.feature_dim, cfg.model.d_hidden, rng, dtype=dtype)
    disc.grow_classes(k, rng)
    opt = Adam(disc.parameters(), lr=cfg.losses.lr_d, betas=(cfg.losses.beta1, cfg.losses.beta2))
    bs = min(cfg.schedule.batch_size, len(y))
    if steps is None:
        steps = cfg.schedule.epochs * max(1, math.ceil(len(y) / bs))
    for _ in range(steps):
        idx = rng.choice(len(y), size=bs, replace=False)
        _, logits = disc(T.Tensor(x[idx]))
        T.backward(T.cross_entropy(logits, y[idx]), disc.parameters())
        opt.step()
    xt, yt = stream.test_upto(len(stream))
    acc, cm = accuracy_from(xt.astype(dtype), yt, disc.predict, k)
    return acc


# ---------------------------------------------------------------- checkpoints

def memory_state(trainer):
    mem = trainer.mem
    gen, disc = mem.gen, mem.disc
    meta = {
        "config": trainer.cfg.to_dict(),
        "finished": mem.finished,
        "task_labels": {str(k): v for k, v in gen.task_labels.items()},
        "layers": [{"base_free": l.base_free, "growth_log": l.growth_log, "tasks": sorted(l.snapshots)}
                   for l in gen.layers],
        "counters": {"d_updates": mem.d_updates, "g_updates": mem.g_updates},
        "rng": trainer.rng.bit_generator.state,
    }
    entries = {"meta": meta}
    for i, layer in enumerate(gen.layers):
        entries[f"g{i}.W"] = layer.W.data
        entries[f"g{i}.b"] = layer.b.data
        entries[f"g{i}.cum"] = layer.cum
        entries[f"g{i}.cum_bias"] = layer.cum_bias
        for t, (m, mb) in layer.snapshots.items():
            entries[f"g{i}.snap{t}"] = m
            if mb is not None:
                entries[f"g{i}.snapb{t}"] = mb
    for t, (W, b) in gen.heads.items():
        entries[f"head{t}.W"] = W.data
        entries[f"head{t}.b"] = b.data
    for p in disc.parameters():
        entries[f"D.{p.name}"] = p.data
    for name, arr in mem.opt_d.state_arrays().items():
        entries[f"optD.{name}"] = arr
    return entries


def save_checkpoint(path, trainer):
    ckpt.save(path, memory_state(trainer))


def restore_trainer(entries, stream=None):
    """Rebuild a trainer (model, critic optimizer, RNG) from checkpoint entries."""
    meta = entries["meta"]
    cfg = from_dict(meta["config"])
    trainer = ContinualTrainer(cfg, stream)
    mem = trainer.mem
    gen, disc = mem.gen, mem.disc
    for i, (layer, info) in enumerate(zip(gen.layers, meta["layers"])):
        layer.W.data = entries[f"g{i}.W"].copy()
        layer.b.data = entries[f"g{i}.b"].copy()
        layer.cum = entries[f"g{i}.cum"].copy()
        layer.cum_bias = entries[f"g{i}.cum_bias"].copy()
        layer.base_free = info["base_free"]
        layer.growth_log = [tuple(r) for r in info["growth_log"]]
        layer.snapshots = {}
        for t in info["tasks"]:
            mb = entries.get(f"g{i}.snapb{t}")
            layer.snapshots[t] = (entries[f"g{i}.snap{t}"].copy(), None if mb is None else mb.copy())
    gen.task_labels = {int(k): v for k, v in meta["task_labels"].items()}
    gen.heads = {}
    for t in gen.task_labels:
        gen.heads[t] = (T.Parameter(entries[f"head{t}.W"].copy(), name=f"head{t}.W"),
                        T.Parameter(entries[f"head{t}.b"].copy(), name=f"head{t}.b"))
    for p in disc.parameters():
        p.data = entries[f"D.{p.name}"].copy()
    mem.opt_d.load_state_arrays({k[len("optD."):]: v for k, v in entries.items() if k.startswith("optD.")})
    mem.finished = list(meta["finished"])
    mem.d_updates = meta["counters"]["d_updates"]
    mem.g_updates = meta["counters"]["g_updates"]
    trainer.rng.bit_generator.state = meta["rng"]
    return trainer
