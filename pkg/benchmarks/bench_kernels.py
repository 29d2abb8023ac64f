"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run on the shapes it sees during training and evaluation,
and the result of both backends is checked to agree before timing.
"""
import argparse
import timeit

import numpy as np

from behaviorkit import _fallback, kernels


def cases(rng):
    T, n = 128, 64
    rewards, values = rng.normal(size=(T, n)), rng.normal(size=(T, n))
    dones = (rng.random((T, n)) < 0.01).astype(float)
    last = rng.normal(size=n)
    pos, vel = rng.normal(size=(64, 2, 2)), rng.normal(size=(64, 2, 2))
    force = rng.uniform(-1, 1, size=(64, 2, 2))
    actuated = np.array([1, 0], dtype=np.uint8)
    radius = np.array([0.0, 0.5])
    x, y = rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2)) + 1.0
    samples = rng.uniform(-5, 5, size=(4096, 2))
    lo, hi = np.full(2, -5.0), np.full(2, 5.0)
    return {
        "gae (128x64)": (kernels.gae, (rewards, values, dones, last, 0.99, 0.95)),
        "point_mass_step (64 envs)": (kernels.point_mass_step,
                                      (pos, vel, force, actuated, radius, 0.05, 0.1, 50.0)),
        "mean_pairwise_distance (1000x1000)": (kernels.mean_pairwise_distance, (x, y)),
        "bin_counts (4096 samples, 16^2)": (kernels.bin_counts, (samples, lo, hi, 16)),
    }


def _agree(a, b):
    if isinstance(a, tuple):
        return all(_agree(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; build it with "
              "`python setup.py build_ext --inplace`")
        return 1
    compiled = kernels._compiled
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, (fn, fargs) in cases(rng).items():
        if not _agree(fn(*fargs, impl=_fallback), fn(*fargs, impl=compiled)):
            raise SystemExit(f"{name}: backends disagree")
        times = {}
        for label, impl in (("python", _fallback), ("cython", compiled)):
            timer = timeit.Timer(lambda: fn(*fargs, impl=impl))
            number, _ = timer.autorange()
            times[label] = min(timer.repeat(args.repeat, number)) / number * 1e3
        print(f"{name:<38}{times['python']:>12.3f}{times['cython']:>12.3f}"
              f"{times['python'] / times['cython']:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
