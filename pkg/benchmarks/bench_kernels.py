"""Compare the numba and pure-numpy paths of the hot kernels.

Run: python3 benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly (the env flag only picks the default), so one
process times both. Outputs are checked for agreement before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from romdp_sim2real import kernels
from romdp_sim2real._accel import HAS_NUMBA
from romdp_sim2real.legendre import KernelSpec


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (JIT compile on the numba path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng: np.random.Generator):
    coefs = KernelSpec(2.5, 1).coefs
    lattice = np.linspace(-5.5, -0.5, 60)[:, None]
    for n in (4_096, 65_536):
        x = rng.normal(-3.0, 0.6, size=(n, 1))
        h = n ** (-1 / 6)
        yield (f"kde n={n} m=60",
               lambda x=x, h=h: kernels.kde_eval_numpy(x, lattice, h, coefs),
               lambda x=x, h=h: kernels.kde_eval(x, lattice, h, coefs))
    x2 = rng.normal(size=(20_000, 2))
    grid = np.stack(np.meshgrid(np.linspace(-2, 2, 40), np.linspace(-2, 2, 40)), -1).reshape(-1, 2)
    c2 = KernelSpec(2.5, 2).coefs
    yield ("kde d=2 n=20000 m=1600",
           lambda: kernels.kde_eval_numpy(x2, grid, 0.3, c2),
           lambda: kernels.kde_eval(x2, grid, 0.3, c2))
    pts = rng.uniform(0, 6, size=(200_000, 1))
    centers = np.array([[3.8], [4.7]])
    widths = np.array([[0.7], [0.6]])
    weights = np.array([0.6, 0.4])
    yield ("bump pdf n=200000",
           lambda: kernels.bump_mixture_eval_numpy(pts, centers, widths, weights, 3),
           lambda: kernels.bump_mixture_eval(pts, centers, widths, weights, 3))
    xq = rng.uniform(0.5, 5.5, size=1_000_000)
    table = rng.random((257, 2))
    yield ("table interp n=1e6",
           lambda: kernels.interp_uniform_numpy(xq, 0.5, 5 / 256, table),
           lambda: kernels.interp_uniform(xq, 0.5, 5 / 256, table))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAS_NUMBA:
        print("numba unavailable or disabled; both columns time the numpy path")
    rng = np.random.default_rng(0)
    print(f"{'case':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, slow, fast in cases(rng):
        diff = float(np.max(np.abs(slow() - fast())))
        t_np = best_of(slow, args.repeat)
        t_nb = best_of(fast, args.repeat)
        print(f"{name:28s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
