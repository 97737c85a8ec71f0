"""Time each hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Both implementations are called directly from ``kernels.IMPLS`` on identical
inputs shaped like one training step of the default model (batch 32). The
numba timings exclude JIT compilation (one warm-up call per kernel).
"""
import argparse
import time

import numpy as np

from prospect_lab import _accel, kernels


def _inputs():
    rng = np.random.default_rng(0)
    f32 = np.float32
    b, c1, c2 = 32, 32, 64
    xp = rng.standard_normal((b, 34, 34, c1)).astype(f32)
    cols = rng.standard_normal((b, 32, 32, 3, 3, c1)).astype(f32)
    h = rng.standard_normal((b, 32, 32, c1)).astype(f32)
    g = (0.1 * rng.standard_normal((b, c1))).astype(f32)
    be = (0.1 * rng.standard_normal((b, c1))).astype(f32)
    _, mask = kernels._film_relu_fwd_np(h, g, be)
    dr = rng.standard_normal(h.shape).astype(f32)
    tmask = rng.random((16, 16)) > 0.5
    templates = rng.random((375, 16, 16)) > 0.5
    return {
        "philox": (0, 1 << 16, 7, 12345),
        "im2col": (xp, 3, 3, 1),
        "col2im": (cols, 34, 34, 1),
        "template_iou": (tmask, templates),
        "film_relu_fwd": (h, g, be),
        "film_relu_bwd": (dr, h, g, mask),
    }, c2


def _time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.USE_NUMBA:
        print("numba backend disabled or missing; timing numpy only")
    inputs, _ = _inputs()
    print(f"{'kernel':<15}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (np_fn, nb_fn) in kernels.IMPLS.items():
        a = inputs[name]
        t_np = _time(np_fn, a, args.repeat)
        if _accel.USE_NUMBA:
            nb_fn(*a)  # compile
            t_nb = _time(nb_fn, a, args.repeat)
            print(f"{name:<15}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")
        else:
            print(f"{name:<15}{t_np * 1e3:>10.2f}{'-':>10}{'-':>9}")


if __name__ == "__main__":
    main()
