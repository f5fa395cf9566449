"""Compare the compiled core against the numpy fallback on kernel estimation.

    python3 benchmarks/bench_backends.py [--cells 20] [--samples 100] [--repeat 3]

Both backends draw the same noise, so the kernels are checked for bitwise
equality before timings are reported.
"""
import argparse
import time

import numpy as np

from randpoincare import _backend
from randpoincare import poincare as pc
from randpoincare import sde


def timed(backend, model, grid, samples, repeat):
    best, K = np.inf, None
    with _backend.use_backend(backend):
        for _ in range(repeat):
            t0 = time.perf_counter()
            K = pc.build_kernel(model, grid, samples, seed=1)
            best = min(best, time.perf_counter() - t0)
    return best, K


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=20)
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    model = sde.reference_model(sigma=args.sigma)
    grid = pc.Grid(0.5, 3.0, args.cells)
    legs = args.cells * args.samples
    rows = []
    kernels = {}
    for name in _backend.available():
        t, kernels[name] = timed(name, model, grid, args.samples, args.repeat)
        rows.append((name, t))
    print(f"{legs} one-return legs, sigma={args.sigma}, best of {args.repeat}")
    for name, t in rows:
        print(f"  {name:9s} {t:8.3f} s  {legs / t:10.0f} legs/s")
    if len(rows) == 2:
        times = dict(rows)
        same = np.array_equal(kernels["compiled"].matrix, kernels["python"].matrix)
        print(f"  speedup   {times['python'] / times['compiled']:8.1f}x")
        print(f"  bitwise identical kernels: {same}")


if __name__ == "__main__":
    main()
