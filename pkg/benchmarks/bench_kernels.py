"""Benchmark the numba kernel lane against the pure-numpy fallback.

Runs the three tree kernels on a deep synthetic tree and on a batch of
battery-sized trees, then times a full solve-plus-sensitivity pipeline in
whichever lane this process was started with.  Compare lanes with:

    python benchmarks/bench_kernels.py
    TREESENSE_NUMBA=0 python benchmarks/bench_kernels.py
"""

import argparse
import time

import numpy as np

from treesense import kernels
from treesense.sensitivity import sensitivity
from treesense.solver import solve_primal
from treesense.tree import random_tree
from treesense.utility import BlendUtility


def time_call(fn, *args, repeat=200):
    fn(*args)  # warm up (numba compilation happens here)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    deep = random_tree(rng, periods=6, children=(4, 4), assets=(2, 2))
    H = np.ascontiguousarray(rng.normal(0, 0.1, (deep.nonleaf_ids.shape[0], deep.d)))
    vals = np.zeros(deep.n)
    vals[deep.leaf_ids] = rng.normal(0, 1, deep.n_leaves)

    rows = [
        ("propagate_wealth", time_call(
            kernels.propagate_wealth, deep.parent, deep.srow, deep.level_starts,
            deep.prices, H, 1.0, repeat=repeat)),
        ("aggregate_up", time_call(
            kernels.aggregate_up, deep.parent, deep.level_starts, vals,
            repeat=repeat)),
        ("expected_child", time_call(
            kernels.expected_child, deep.parent, deep.edge_prob,
            deep.level_starts, vals, repeat=repeat)),
    ]
    print(f"tree: {deep.n} nodes, {deep.n_leaves} leaves, d={deep.d}")
    for name, dt in rows:
        print(f"  {name:<18} {dt * 1e6:9.1f} us/call")


def bench_pipeline(n_models):
    rng = np.random.default_rng(1)
    u = BlendUtility([0.6, 0.4], [0.7, 2.5])
    models = [random_tree(rng) for _ in range(n_models)]
    solve_primal(models[0], u, 1.0)  # warm up
    t0 = time.perf_counter()
    for m in models:
        sol = solve_primal(m, u, 1.0)
        sensitivity(m, sol)
    dt = time.perf_counter() - t0
    print(f"solve+sensitivity pipeline: {n_models} models in {dt:.2f}s "
          f"({dt / n_models * 1e3:.2f} ms/model)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--models", type=int, default=100)
    args = ap.parse_args()
    lane = "numba" if kernels.NUMBA_ENABLED else "numpy"
    print(f"kernel lane: {lane}")
    bench_kernels(args.repeat)
    bench_pipeline(args.models)


if __name__ == "__main__":
    main()
