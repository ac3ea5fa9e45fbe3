"""Compare the numba and pure-numpy hot kernels.

Run ``python benchmarks/bench_kernels.py [--sizes 64 256 1024] [--repeat 5]``.
Both paths are called explicitly, so ``MDELAB_DISABLE_NUMBA`` does not need
to be toggled; when numba is unavailable only the numpy column is printed.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from mdelab._accel import NUMBA_ENABLED
from mdelab.kernels import banded_apply, moving_average
from mdelab.rmt import DEFAULT_FILTER
from mdelab.self_energy import CovarianceKernel


def _best(fn, repeat: int) -> float:
    fn()  # warm-up (jit compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(sizes, repeat: int):
    rng = np.random.default_rng(0)
    rows = []
    for N in sizes:
        k = CovarianceKernel.from_filter(N, DEFAULT_FILTER, beta=1)
        R = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
        env = rng.uniform(0.8, 1.2, size=(N, N))
        env = (env + env.T) / 2
        X = rng.normal(size=(2, N, N))
        cases = {
            "banded_apply": lambda u: banded_apply(R, k.Kc, k.Kd, None, k.r, use_numba=u),
            "banded_apply+env": lambda u: banded_apply(R, k.Kc, k.Kd, env, k.r, use_numba=u),
            "moving_average": lambda u: moving_average(X, DEFAULT_FILTER, use_numba=u),
        }
        for name, fn in cases.items():
            t_np = _best(lambda: fn(False), repeat)
            t_nb = _best(lambda: fn(True), repeat) if NUMBA_ENABLED else float("nan")
            if NUMBA_ENABLED:
                err = float(np.max(np.abs(fn(True) - fn(False))))
            else:
                err = float("nan")
            rows.append((name, N, t_np, t_nb, err))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    print(f"numba enabled: {NUMBA_ENABLED}")
    print(f"{'kernel':<18}{'N':>6}{'numpy [ms]':>13}{'numba [ms]':>13}{'speedup':>9}{'max diff':>11}")
    for name, N, t_np, t_nb, err in bench(args.sizes, args.repeat):
        print(f"{name:<18}{N:>6}{1e3 * t_np:>13.3f}{1e3 * t_nb:>13.3f}{t_np / t_nb:>9.1f}{err:>11.1e}")


if __name__ == "__main__":
    main()
