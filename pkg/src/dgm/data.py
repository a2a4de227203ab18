"""Datasets and class-incremental task streams."""
import csv
import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_UBYTE = 0x08
IMAGE_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    pass


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def parse_idx(raw):
    """Decode an unsigned-byte IDX buffer into an integer array."""
    if len(raw) < 4:
        raise IDXError(f"truncated IDX header: {len(raw)} bytes, need 4 at offset 0")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise IDXError(f"bad IDX magic 0x{raw[:4].hex()} at offset 0")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IDXError(f"truncated IDX dimensions: need {end} bytes, file has {len(raw)} (offset 4)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:end])
    count = int(np.prod(dims))
    if len(raw) < end + count:
        raise IDXError(f"truncated IDX payload: expected {count} bytes at offset {end}, found {len(raw) - end}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=end).reshape(dims)


def normalize_pixels(arr):
    """Map uint8 0..255 onto [-1, 1]."""
    return np.asarray(arr, dtype=np.float64) / 127.5 - 1.0


def read_idx(path):
    """Read an IDX file (plain or gzip).

    Rank-3 image files come back as normalized rows ``(count, rows*cols)``;
    rank-1 label files as ``int64`` labels.
    """
    with _open(path) as fh:
        raw = fh.read()
    arr = parse_idx(raw)
    if arr.ndim == 1:
        return arr.astype(np.int64)
    return normalize_pixels(arr.reshape(arr.shape[0], -1))


def write_idx(path, arr):
    """Write a uint8 array as IDX; gzip if ``path`` ends with ``.gz``."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    head = struct.pack(">HBB", 0, IDX_UBYTE, arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(head + arr.tobytes())


def downsample2x2(x, side):
    """Average-pool flattened ``side x side`` images by 2x2."""
    imgs = x.reshape(-1, side // 2, 2, side // 2, 2)
    return imgs.mean(axis=(2, 4)).reshape(x.shape[0], -1)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset features must be finite")

    def __len__(self):
        return len(self.y)


@dataclass
class Task:
    index: int
    labels: list
    train: Dataset
    test: Dataset


@dataclass
class TaskStream:
    tasks: list
    n_classes: int
    feature_dim: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def task(self, t):
        return self.tasks[t - 1]

    def labels_upto(self, t):
        return [y for task in self.tasks[:t] for y in task.labels]

    def test_upto(self, t):
        xs = [task.test.x for task in self.tasks[:t]]
        ys = [task.test.y for task in self.tasks[:t]]
        return np.concatenate(xs), np.concatenate(ys)

    def all_train(self):
        return (np.concatenate([task.train.x for task in self.tasks]),
                np.concatenate([task.train.y for task in self.tasks]))

    def to_csv(self, path):
        """Export every sample as ``task,split,label,f0,f1,...``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "split", "label"] + [f"f{i}" for i in range(self.feature_dim)])
            for task in self.tasks:
                for ds in (task.train, task.test):
                    for xi, yi in zip(ds.x, ds.y):
                        w.writerow([task.index, ds.split, int(yi)] + [repr(float(v)) for v in xi])


def _partition(classes, classes_per_task=None, groups=None):
    if groups is None:
        if not classes_per_task or classes_per_task < 1:
            raise ValueError("classes_per_task must be a positive integer")
        groups = [classes[i:i + classes_per_task] for i in range(0, len(classes), classes_per_task)]
    seen = set()
    for g in groups:
        for c in g:
            if c in seen:
                raise ValueError(f"class {c} assigned to more than one task")
            seen.add(c)
    return [list(g) for g in groups if len(g)]


def split_incremental(train, test, classes_per_task=None, groups=None, order_seed=None, per_class_cap=None):
    """Cut a labelled dataset into tasks with disjoint label sets.

    Either ``classes_per_task`` (contiguous blocks over the sorted, optionally
    permuted, labels) or explicit ``groups`` of original labels. Labels are
    remapped to dense ids in task order, so task 1 owns ids ``0..k-1``.
    Classes not mentioned in ``groups`` are dropped.
    """
    classes = sorted(set(np.asarray(train.y).tolist()))
    if order_seed is not None and groups is None:
        classes = list(np.random.default_rng(order_seed).permutation(classes))
        classes = [int(c) for c in classes]
    parts = _partition(classes, classes_per_task, groups)
    remap = {}
    for g in parts:
        for c in g:
            remap[c] = len(remap)
    tasks = []
    for t, g in enumerate(parts, start=1):
        dsets = []
        for ds in (train, test):
            idx = []
            for c in g:
                ci = np.flatnonzero(ds.y == c)
                if per_class_cap is not None and ds.split == "train":
                    ci = ci[:per_class_cap]
                idx.append(ci)
            idx = np.sort(np.concatenate(idx))
            y = np.array([remap[int(c)] for c in ds.y[idx]], dtype=np.int64)
            dsets.append(Dataset(ds.x[idx], y, ds.split))
        tasks.append(Task(t, [remap[c] for c in g], dsets[0], dsets[1]))
    return TaskStream(tasks, len(remap), train.x.shape[1], {"label_map": {int(k): v for k, v in remap.items()}})


def gaussian_tasks(num_tasks, classes_per_task, samples_per_class, seed, radius=4.0, sigma=0.35,
                   test_fraction=0.2, feature_scale=None):
    """Stream of 2-D isotropic Gaussian classes with means on a circle.

    Features are divided by ``feature_scale`` (default ``radius + 6 sigma``)
    and clipped so they live in ``[-1, 1]``, matching a tanh generator.
    """
    if num_tasks < 1 or classes_per_task < 1 or samples_per_class < 1:
        raise ValueError("num_tasks, classes_per_task and samples_per_class must be positive")
    rng = np.random.default_rng(seed)
    k = num_tasks * classes_per_task
    angles = 2 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    scale = feature_scale if feature_scale is not None else radius + 6 * sigma
    n_test = int(round(samples_per_class * test_fraction))
    n_train = samples_per_class - n_test
    xs, ys, splits = [], [], []
    for c in range(k):
        pts = means[c] + sigma * rng.standard_normal((samples_per_class, 2))
        xs.append(np.clip(pts / scale, -1.0, 1.0))
        ys.append(np.full(samples_per_class, c))
        splits.append(np.array(["train"] * n_train + ["test"] * n_test))
    x, y, sp = np.concatenate(xs), np.concatenate(ys), np.concatenate(splits)
    train = Dataset(x[sp == "train"], y[sp == "train"], "train")
    test = Dataset(x[sp == "test"], y[sp == "test"], "test")
    stream = split_incremental(train, test, classes_per_task=classes_per_task)
    stream.meta.update({"means": means, "sigma": sigma, "radius": radius, "feature_scale": scale,
                        "source": "gaussian"})
    return stream


def data_dir(default=None):
    return os.environ.get("DGM_DATA_DIR", default)


def _find(root, stem):
    for name in (stem, stem + ".gz"):
        p = os.path.join(root, name)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def load_mnist(root, downsample=True):
    """Load the train/test IDX pairs found under ``root``."""
    out = {}
    for split, (img, lab) in IMAGE_FILES.items():
        x = read_idx(_find(root, img))
        y = read_idx(_find(root, lab))
        if len(x) != len(y):
            raise IDXError(f"{split}: {len(x)} images but {len(y)} labels")
        if downsample:
            x = downsample2x2(x, int(round(np.sqrt(x.shape[1]))))
        out[split] = Dataset(x, y, split)
    return out["train"], out["test"]
