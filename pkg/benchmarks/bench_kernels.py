"""Compare the numba kernels against the numpy fallback.

Part 1 times each kernel in-process on both paths (numba is compiled before
timing). Part 2 times a short end-to-end training run in two subprocesses,
one with ``DGM_DISABLE_NUMBA=1``, since the backend is fixed at import.

    python benchmarks/bench_kernels.py [--repeat 200] [--skip-e2e]
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from dgm import _kernels as K

E2E_SNIPPET = """
import json, time
from dgm.config import load_config
from dgm.trainer import run_stream
from dgm import _kernels
cfg = load_config(overrides=["data.num_tasks=2", "schedule.epochs=2", "schedule.steps_per_epoch=20"])
t0 = time.perf_counter()
tr = run_stream(cfg)
print(json.dumps({"backend": _kernels.BACKEND, "seconds": time.perf_counter() - t0,
                  "accuracy": tr.ledger.accuracy[2]}))
"""


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng, size):
    x = rng.standard_normal(size)
    p, g = rng.standard_normal(size), rng.standard_normal(size)
    m, v = np.zeros(size), np.zeros(size)
    active = rng.random(size) < 0.7
    a, b = rng.random(size) < 0.5, rng.random(size) < 0.5
    adam_args = (0.001, 0.5, 0.9, 1e-8, 0.5, 0.1)
    return {
        "sigmoid": (lambda: K._np_sigmoid(x), lambda: K._nb_sigmoid(x)),
        "leaky_relu": (lambda: K._np_leaky_relu(x, 0.2), lambda: K._nb_leaky_relu(x, 0.2)),
        "leaky_slope": (lambda: K._np_leaky_slope(x, 0.2), lambda: K._nb_leaky_slope(x, 0.2)),
        "adam_update": (lambda: K._np_adam_update(p, g, m, v, active, *adam_args),
                        lambda: K._nb_adam_update(p, g, m, v, active, *adam_args)),
        "count_flips": (lambda: K._np_count_flips(a, b), lambda: K._nb_count_flips(a, b)),
    }


def bench_kernels(repeat, sizes):
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; kernel comparison skipped")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12} {'size':>8} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for size in sizes:
        for name, (np_fn, nb_fn) in kernel_cases(rng, size).items():
            nb_fn()  # compile
            t_np = best_of(np_fn, repeat)
            t_nb = best_of(nb_fn, repeat)
            print(f"{name:<12} {size:>8} {t_np * 1e6:>10.1f} {t_nb * 1e6:>10.1f} {t_np / t_nb:>7.2f}x")


def bench_end_to_end():
    results = []
    for disable in ("0", "1"):
        env = dict(os.environ, DGM_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", E2E_SNIPPET], env=env, capture_output=True,
                             text=True, check=True)
        results.append(json.loads(out.stdout.strip().splitlines()[-1]))
    print(f"\n{'backend':<8} {'seconds':>8} {'A_2':>6}")
    for r in results:
        print(f"{r['backend']:<8} {r['seconds']:>8.2f} {r['accuracy']:>6.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 4096, 262144])
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat, args.sizes)
    if not args.skip_e2e:
        bench_end_to_end()


if __name__ == "__main__":
    main()
