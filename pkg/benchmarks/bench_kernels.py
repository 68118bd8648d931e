"""Time the hot kernels under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--res 64 128 256] [--repeat 5]

Each kernel is warmed up once per backend (so numba compilation is not
counted) and the best of ``--repeat`` wall times is reported.
"""
import argparse
import time

import numpy as np

from rdtlab import use_backend
from rdtlab.flow import cfl_limit, evolve, rdtf_rhs
from rdtlab.initial_data import RoughMetricSpec, generate_rough_metric
from rdtlab.kernels import d1, d2, interp_cubic
from rdtlab.tensor_core import BackgroundMetric, TorusGrid


def best_of(fn, repeat):
    fn()
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return min(ts)


def cases(N, dim):
    grid = TorusGrid(dim, N, 1.0)
    bg = BackgroundMetric.flat_torus(grid)
    g = generate_rough_metric(RoughMetricSpec(2.5, 0.05, seed=1), bg)
    f = g.packed
    dx = grid.spacing
    dt = cfl_limit(g, bg)
    pts = np.random.default_rng(0).uniform(0, N, (dim, N ** dim))
    return {
        "d1": lambda: d1(f, 1, dx),
        "d2": lambda: d2(f, 1, dx),
        "rdtf_rhs": lambda: rdtf_rhs(g, bg),
        "interp_cubic": lambda: interp_cubic(f, pts),
        "evolve(10 steps)": lambda: evolve(g, 10 * dt, bg, dt=dt),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args(argv)

    print(f"{'kernel':<18}{'N':>6}{'numba [ms]':>14}{'numpy [ms]':>14}{'speedup':>10}")
    for N in a.res:
        for name, fn in cases(N, a.dim).items():
            t = {}
            for b in ("numba", "numpy"):
                with use_backend(b):
                    t[b] = best_of(fn, a.repeat)
            print(f"{name:<18}{N:>6}{1e3 * t['numba']:>14.3f}{1e3 * t['numpy']:>14.3f}"
                  f"{t['numpy'] / t['numba']:>10.2f}")


if __name__ == "__main__":
    main()
