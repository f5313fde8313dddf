"""Compare the compiled and pure-Python RK4 sweep kernels.

Usage::

    python benchmarks/bench_kernels.py [--steps 2000] [--repeat 5]

Prints the best wall-clock time per backend for the affine (mean) and
Lyapunov (covariance) sweeps at the state sizes used by the double-well
(n=1) and reentry (n=5) problems, and checks that both backends agree.
"""

import argparse
import timeit

import numpy as np

from cdsmooth import kernels


def _problem(K, n, rng):
    def stack(shape):
        return rng.standard_normal((K,) + shape) * 0.1
    M = [stack((n, n)) - np.eye(n) for _ in range(3)]
    c = [stack((n,)) for _ in range(3)]
    S = []
    for _ in range(3):
        B = stack((n, n))
        S.append(B @ np.swapaxes(B, -1, -2))
    jumps = np.zeros((K + 1, n))
    jumps[::10] = 0.01
    return M, c, S, rng.standard_normal(n), np.eye(n), jumps


def run(steps=2000, repeat=5, sizes=(1, 5), seed=0):
    rng = np.random.default_rng(seed)
    backends = ["python"]
    if kernels.BACKEND == "cython":
        backends.append("cython")
    rows = []
    for n in sizes:
        M, c, S, y0, Y0, jumps = _problem(steps, n, rng)
        calls = {
            "affine": lambda b: kernels.affine_rk4(*M, *c, y0, 0.01, jumps, backend=b),
            "lyapunov": lambda b: kernels.lyap_rk4(*M, *S, Y0, 0.01, backend=b),
        }
        for name, call in calls.items():
            times, outs = {}, {}
            for b in backends:
                outs[b] = call(b)
                times[b] = min(timeit.repeat(lambda: call(b), number=1, repeat=repeat))
            err = (max(np.max(np.abs(x - y)) for x, y in zip(outs["python"], outs["cython"]))
                   if "cython" in outs else float("nan"))
            rows.append((name, n, times.get("python"), times.get("cython"), err))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    print(f"compiled backend available: {kernels.BACKEND == 'cython'}")
    print(f"{'kernel':<10}{'n':>3}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}{'max diff':>12}")
    for name, n, tp, tc, err in run(args.steps, args.repeat):
        if tc is None:
            print(f"{name:<10}{n:>3}{tp * 1e3:>14.2f}{'-':>14}{'-':>10}{'-':>12}")
        else:
            print(f"{name:<10}{n:>3}{tp * 1e3:>14.2f}{tc * 1e3:>14.2f}{tp / tc:>10.1f}{err:>12.1e}")


if __name__ == "__main__":
    main()
