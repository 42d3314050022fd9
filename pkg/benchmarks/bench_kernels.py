"""Compare the numba and pure-numpy kernel backends on closed-loop-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel best-of-N wall time for each backend and the speed-up.
The first numba call (compilation, or cache load) is excluded.
"""
import argparse
import time

import numpy as np

from cld.kernels import numba_backend, numpy_backend


def _best(fn, repeat):
    fn()  # warm-up / JIT
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def workloads(rng):
    grid = rng.random((480, 640)) < 0.7
    B, T, J = 64, 20, 5
    init = np.column_stack([rng.uniform(0, 100, B), rng.uniform(0, 100, B), rng.uniform(0, 10, B),
                            rng.uniform(-np.pi, np.pi, B)])
    acts = np.stack([rng.uniform(-4, 4, (B, T)), rng.uniform(-1, 1, (B, T))], axis=-1)
    states = np.ascontiguousarray(numpy_backend.rollout_batch(init, acts, 0.1))
    ego = np.ascontiguousarray(states[..., :2])
    others = rng.uniform(0, 100, (B, J, T + 1, 2))
    valid = rng.random((B, J)) < 0.8
    poses = np.ascontiguousarray(init[:, [0, 1, 3]])
    theta = rng.uniform(-50, 50, 100_000)
    return {
        "wrap_angles(1e5)": lambda be: be.wrap_angles(theta),
        "rollout_batch(64x20)": lambda be: be.rollout_batch(init, acts, 0.1),
        "offroad_batch(64x21)": lambda be: be.offroad_batch(grid, 0.0, 0.0, 0.5, states),
        "min_distance_batch(64x5x21)": lambda be: be.min_distance_batch(ego, others, valid),
        "crop_batch(64x32x32)": lambda be: be.crop_batch(grid, 0.0, 0.0, 0.5, poses, 32, 32.0, 8.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if numba_backend is None:
        print("numba backend unavailable (CLD_DISABLE_NUMBA set or numba missing); nothing to compare")
        return
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}")
    for name, fn in workloads(rng).items():
        a = _best(lambda: fn(numpy_backend), args.repeat)
        b = _best(lambda: fn(numba_backend), args.repeat)
        print(f"{name:<30}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{a / b:>9.1f}x")


if __name__ == "__main__":
    main()
