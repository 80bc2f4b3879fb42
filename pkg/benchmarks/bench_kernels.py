"""Time the compiled and pure-Python kernel backends on representative sizes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from pointrgcn import kernels
from pointrgcn.geom import Box7, bev_corners


def cases(rng: np.random.Generator) -> dict:
    feats = rng.normal(size=(128, 32))
    boxes = [Box7(*rng.uniform(-5, 5, 3), *rng.uniform(1, 4, 3), rng.uniform(-3, 3)) for _ in range(64)]
    corners = bev_corners(boxes)
    rows = rng.normal(size=(16 * 128, 64))
    nbr = rng.integers(0, len(rows), size=(len(rows), 16))
    idx = rng.integers(0, 512, size=20_000)
    src = rng.normal(size=(20_000, 64))
    return {
        "knn_dilated N=128 C=32 k=16 d=2": lambda b: kernels.knn_dilated(feats, 16, 2, backend=b),
        "quad_intersection 64x64": lambda b: kernels.quad_intersection_matrix(corners, corners, backend=b),
        "max_gather R=2048 C=64 k=16": lambda b: kernels.max_gather(rows, nbr, backend=b),
        "scatter_add_rows 20000 rows": lambda b: kernels.scatter_add_rows(np.zeros((512, 64)), idx, src, backend=b),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled kernels not built; timing the Python fallback only")
    print(f"{'kernel':36s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = []
        for b in backends:
            fn(b)  # warm up
            n = 3
            times.append(min(timeit.repeat(lambda: fn(b), number=n, repeat=args.repeat)) / n)
        line = f"{name:36s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
