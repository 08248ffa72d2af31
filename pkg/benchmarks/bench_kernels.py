"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--points 8192] [--repeat 3]

Prints one tab-separated row per kernel: name, cython seconds, numpy
seconds, speedup, and whether the two outputs are identical.
"""
import argparse
import time

import numpy as np

from dfcn import kernels


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def cases(n, rng):
    pts = np.column_stack([rng.uniform(0, 30, (n, 2)), rng.uniform(0, 10, n)])
    queries = np.arange(n, dtype=np.int64)
    coarse = pts[: n // 8].copy()
    feats = rng.standard_normal((n, 64))
    idx = rng.integers(0, n // 8, n).astype(np.int64)
    return [
        ("sector_knn 2D n_dirs=8 k=2 r=2", lambda b: b.sector_knn(pts, queries, 8, 2, 2.0, kernels.MODE_SECTOR2D)),
        ("sector_knn octant k=2 r=2", lambda b: b.sector_knn(pts, queries, 8, 2, 2.0, kernels.MODE_OCTANT3D)),
        ("ball knn 3D k=32 r=2", lambda b: b.sector_knn(pts, queries[: n // 8], 1, 32, 2.0, kernels.MODE_PLAIN)),
        (f"fps {n}->{n // 8}", lambda b: b.farthest_point_sampling(pts, n // 8, 0)),
        ("knn_brute k=32", lambda b: b.knn_brute(coarse, pts, 32)),
        ("scatter_add_rows d=64", lambda b: b.scatter_add_rows(feats, idx, n // 8)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=8192)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    compiled = kernels.get_backend("cython")
    fallback = kernels.get_backend("numpy")
    rng = np.random.default_rng(args.seed)
    print("kernel\tcython_s\tnumpy_s\tspeedup\tidentical")
    for name, fn in cases(args.points, rng):
        tc, oc = best_of(lambda: fn(compiled), args.repeat)
        tn, on = best_of(lambda: fn(fallback), args.repeat)
        # scatter-add sums in a different order on each backend; compare to rounding
        ok = same(oc, on) if not name.startswith("scatter") else np.allclose(oc, on, rtol=0, atol=1e-12)
        print(f"{name}\t{tc:.4f}\t{tn:.4f}\t{tn / tc:.1f}x\t{ok}")


if __name__ == "__main__":
    main()
