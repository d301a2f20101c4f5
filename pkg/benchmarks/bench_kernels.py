"""Compare the numba and numpy kernel backends.

Each backend runs in its own interpreter because the choice is fixed at import
time by ``SIMFREE_NUMBA``.  Usage::

    python benchmarks/bench_kernels.py [--repeats 5] [--out bench_kernels.csv]
"""

import argparse
import csv
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
from simfree import kernels
from simfree.policy import init_policy
from simfree.problems import LqrSpec, lqr_problem
from simfree.grad import simfree_gradient
from simfree.rng import CounterRng
from simfree.sde_core import sample_wiener_increments, uniform_grid

repeats = int(sys.argv[1])


def best(fn):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


rows = np.arange(100_000, dtype=np.int64)
out = {"backend": kernels.backend()}
out["uniform_pairs_1e5x64"] = best(lambda: kernels.uniform_pairs(rows, 64, 0, 0, 1, 2))
buf = np.zeros((1000, 64, 64))
delta = np.random.default_rng(0).normal(size=(1000, 64))
act = np.random.default_rng(1).normal(size=(1000, 64))
out["accumulate_outer_1000x64x64"] = best(lambda: kernels.accumulate_outer(buf, delta, act))
d = 8
I = np.eye(d)
prob = lqr_problem(LqrSpec(0.2 * I, 0.2 * I, 0.1 * I, I))
pol = init_policy({"kind": "mlp", "dim": d, "widths": [64, 64], "num_freqs": 4}, 0)
grid = uniform_grid(64, 1.0)
out["wiener_1000x64x8"] = best(lambda: sample_wiener_increments(grid, 1000, d, CounterRng(0)))
wp = sample_wiener_increments(grid, 1000, d, CounterRng(0))
out["simfree_direct_1000x64"] = best(lambda: simfree_gradient(prob, pol, grid, wp, path="direct"))
print(json.dumps(out))
"""


def run_backend(flag, repeats):
    env = dict(os.environ, SIMFREE_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", CHILD, str(repeats)], env=env, capture_output=True, text=True)
    if res.returncode != 0:
        raise SystemExit(res.stderr)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args(argv)
    nb = run_backend("1", args.repeats)
    np_ = run_backend("0", args.repeats)
    if nb["backend"] != "numba":
        print("numba is not installed; only the numpy backend was measured")
    keys = [k for k in np_ if k != "backend"]
    table = [{"kernel": k, "numpy_s": np_[k], "numba_s": nb[k], "speedup": np_[k] / nb[k]} for k in keys]
    print(f"{'kernel':32s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for r in table:
        print(f"{r['kernel']:32s} {r['numpy_s']:10.4f} {r['numba_s']:10.4f} {r['speedup']:8.2f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(table)


if __name__ == "__main__":
    main()
