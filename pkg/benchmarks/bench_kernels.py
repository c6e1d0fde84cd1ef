#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the numpy fallback.

Run after `pip install -e .`:

    python benchmarks/bench_kernels.py

Covers the raw conv3x3 forward/backward kernels and one full U-Net
forward+backward, under both backends.
"""

import time

import numpy as np

from adapterlab import tensor as T
from adapterlab import unet as U
from adapterlab.kernels import _corekernels, reference


def timeit(fn, repeats=50):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_raw(c_in, c_out, hw):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(c_in, hw, hw))
    w = rng.normal(size=(c_out, c_in, 3, 3))
    b = rng.normal(size=c_out)
    g = rng.normal(size=(c_out, hw, hw))
    rows = []
    for name, mod in (("compiled", _corekernels), ("numpy", reference)):
        fwd = timeit(lambda: mod.conv3x3_forward(x, w, b))
        bwd = timeit(lambda: mod.conv3x3_backward(x, w, g))
        rows.append((name, fwd, bwd))
    return rows


def bench_unet(backend_mod, cfg, steps=5):
    import adapterlab.kernels as K

    old_fwd, old_bwd = K.conv3x3_forward, K.conv3x3_backward
    K.conv3x3_forward = backend_mod.conv3x3_forward
    K.conv3x3_backward = backend_mod.conv3x3_backward
    try:
        model = U.UNet(cfg, seed=0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, cfg.image_size, cfg.image_size))
        c = rng.normal(size=(6, cfg.cond_dim))
        w = T.Tensor(rng.normal(size=x.shape))

        def run():
            T.reset_tape()
            model.zero_grads()
            loss = T.tsum(T.mul(model.forward(x, 500, c), w))
            T.backward(loss)

        run()  # warm up
        return timeit(run, steps)
    finally:
        K.conv3x3_forward, K.conv3x3_backward = old_fwd, old_bwd


def main():
    print("raw conv3x3 kernels (best of 50):")
    print(f"{'shape':>24} {'backend':>9} {'forward':>10} {'backward':>10}")
    for c_in, c_out, hw in ((16, 16, 16), (32, 32, 16), (64, 64, 8), (128, 64, 8)):
        for name, fwd, bwd in bench_raw(c_in, c_out, hw):
            shape = f"{c_in}->{c_out} @{hw}x{hw}"
            print(f"{shape:>24} {name:>9} {fwd * 1e6:>8.1f}us {bwd * 1e6:>8.1f}us")

    cfg = U.UNetConfig(image_size=16, base_channels=16, channel_mults=(1, 2), cond_dim=12, norm_groups=8)
    print("\nfull U-Net forward+backward (image 16x16, base 16):")
    for name, mod in (("compiled", _corekernels), ("numpy", reference)):
        t = bench_unet(mod, cfg)
        print(f"{name:>9}: {t * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
