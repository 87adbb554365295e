"""Compare the compiled and numpy im2col/col2im kernels on the network's conv shapes.

    python benchmarks/bench_kernels.py [--batch 32] [--repeat 5] [--width 1/4]

Also times one full conv2d forward+backward per layer with each backend
swapped in, and checks the two backends agree bitwise.
"""
import argparse
import time
from fractions import Fraction

import numpy as np

from mtmanip import autodiff as ad
from mtmanip.autodiff import kernels
from mtmanip.net import NetConfig


def layer_shapes(cfg: NetConfig, batch: int):
    """(name, padded input shape, kernel, stride, out channels) for the trunk and pu_conv1."""
    side = cfg.input_side
    cin = 3
    out = []
    names = ("conv1", "conv2", "conv3")
    for name, cout, k, s, p in zip(names, cfg.trunk_channels, cfg.conv_kernels, cfg.conv_strides, cfg.conv_pads):
        out.append((name, (batch, cin, side + 2 * p, side + 2 * p), k, s, p, cout))
        side = (side + 2 * p - k) // s + 1
        cin = cout
    out.append(("pu_conv1", (batch, cin, side, side), cfg.push_conv_kernel, 1, 0, cfg.scaled(cfg.push_conv_channels)))
    return out


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def conv_step(x, w, b, stride, pad):
    xt = ad.Tensor(x, requires_grad=True)
    wt = ad.Tensor(w, requires_grad=True)
    bt = ad.Tensor(b, requires_grad=True)
    ad.backward(ad.sum(ad.conv2d(xt, wt, bt, stride=stride, pad=pad)))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--width", type=Fraction, default=Fraction(1, 4))
    args = ap.parse_args()
    try:
        compiled = kernels.get_backend("compiled")
    except ImportError:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    python = kernels.get_backend("python")
    rng = np.random.default_rng(0)
    cfg = NetConfig(width_scale=args.width)
    print(f"default backend at import: {kernels.BACKEND}; batch {args.batch}, width {args.width}")
    print(f"{'layer':9s} {'kernel':7s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  bitwise")
    for name, shape, k, s, p, cout in layer_shapes(cfg, args.batch):
        xp = rng.standard_normal(shape)
        cols = python[0](xp, k, k, s)
        same = np.array_equal(cols, compiled[0](xp, k, k, s))
        g = rng.standard_normal(cols.shape)
        same &= np.array_equal(python[1](g, shape, k, k, s), compiled[1](g, shape, k, k, s))
        for label, idx, argv in (("im2col", 0, (xp, k, k, s)), ("col2im", 1, (g, shape, k, k, s))):
            tp = best_of(lambda: python[idx](*argv), args.repeat)
            tc = best_of(lambda: compiled[idx](*argv), args.repeat)
            print(f"{name:9s} {label:7s} {1e3 * tp:10.2f} {1e3 * tc:12.2f} {tp / tc:7.2f}x  {same}")

    print()
    print(f"{'layer':9s} {'conv2d fwd+bwd':15s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    saved = kernels.im2col, kernels.col2im
    try:
        for name, shape, k, s, p, cout in layer_shapes(cfg, args.batch):
            n, c, h, w = shape
            x = rng.standard_normal((n, c, h - 2 * p, w - 2 * p))
            wt = rng.standard_normal((cout, c, k, k))
            b = rng.standard_normal(cout)
            res = {}
            for backend, pair in (("python", python), ("compiled", compiled)):
                kernels.im2col, kernels.col2im = pair
                res[backend] = best_of(lambda: conv_step(x, wt, b, s, p), args.repeat)
            print(f"{name:9s} {'':15s} {1e3 * res['python']:10.2f} {1e3 * res['compiled']:12.2f} "
                  f"{res['python'] / res['compiled']:7.2f}x")
    finally:
        kernels.im2col, kernels.col2im = saved
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
