"""Compare the compiled and numpy backends of ``component_terms``.

Usage: python benchmarks/bench_kernels.py [--repeat 20]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from drdselect import kernels


def inputs(n: int, m: int, d: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, d, d))
    prec = A @ np.transpose(A, (0, 2, 1)) + np.eye(d)
    return rng.normal(size=(n, d)), rng.normal(size=(m, d)), prec, rng.normal(size=m)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'n':>8} {'m':>3} {'d':>3} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>8}")
    for n, m, d in [(1_000, 2, 2), (20_000, 2, 2), (100_000, 2, 2), (20_000, 8, 2), (20_000, 2, 8)]:
        data = inputs(n, m, d)
        ref = kernels.component_terms(*data, backend="python")
        times = []
        for b in backends:
            out = kernels.component_terms(*data, backend=b)
            assert all(np.allclose(x, y) for x, y in zip(out, ref))
            t = min(timeit.repeat(lambda: kernels.component_terms(*data, backend=b), number=1, repeat=args.repeat))
            times.append(t * 1e3)
        speed = f"{times[0] / times[1]:8.2f}" if len(times) == 2 else f"{'n/a':>8}"
        print(f"{n:>8} {m:>3} {d:>3} " + " ".join(f"{t:12.3f}" for t in times) + f" {speed}")


if __name__ == "__main__":
    main()
