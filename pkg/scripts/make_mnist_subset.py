"""Convert the 5000-digit MNIST sample shipped with mlxtend into IDX files.

    pip download --no-deps mlxtend && unzip -p mlxtend-*.whl \
        mlxtend/data/data/mnist_5k.csv.gz > mnist_5k.csv.gz
    python scripts/make_mnist_subset.py mnist_5k.csv.gz data/mnist5k

Each CSV row is 784 pixel values followed by the label. The first
``--test-per-class`` samples of every digit go to the test split.
"""
import argparse
import gzip
import os

import numpy as np

from dgm.data import IMAGE_FILES, write_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("out")
    ap.add_argument("--test-per-class", type=int, default=100)
    args = ap.parse_args()
    with gzip.open(args.csv, "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",")
    x = raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    y = raw[:, -1].astype(np.uint8)
    test = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        test[np.flatnonzero(y == c)[:args.test_per_class]] = True
    os.makedirs(args.out, exist_ok=True)
    for split, mask in (("train", ~test), ("test", test)):
        img, lab = IMAGE_FILES[split]
        write_idx(os.path.join(args.out, img + ".gz"), x[mask])
        write_idx(os.path.join(args.out, lab + ".gz"), y[mask])
        print(split, int(mask.sum()))


if __name__ == "__main__":
    main()
