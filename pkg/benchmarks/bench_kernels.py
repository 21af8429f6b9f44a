"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the best-of-N wall time of each backend.
"""
import argparse
import timeit

import numpy as np

from ppdepth.kernels import backend, have_compiled


def cases(rng):
    x = rng.standard_normal((4 * 256, 256))
    flat = x.ravel().copy()
    th = np.tanh(flat)
    g = rng.standard_normal(flat.shape)
    xhat, inv, gx = np.empty_like(x), np.empty(len(x)), np.empty_like(x)
    mag = np.abs(rng.standard_normal((256, 256)))
    ggx, ggy = rng.standard_normal((2, 256, 256))
    q, r = rng.standard_normal((2, 2000, 3))
    return {
        "gelu_backward": lambda k: k.gelu_backward(g, flat, th, np.empty_like(flat)),
        "layer_norm_forward": lambda k: k.layer_norm_forward(x, 1e-6, xhat, inv),
        "layer_norm_backward": lambda k: k.layer_norm_backward(x, xhat, inv, gx),
        "nms": lambda k: k.nms(mag, ggx, ggy),
        "hysteresis": lambda k: k.hysteresis(mag, 0.8, 1.5),
        "nearest_sqdist": lambda k: k.nearest_sqdist(q, r),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    names = ["python"] + (["compiled"] if have_compiled() else [])
    if len(names) == 1:
        print("compiled kernels not built; showing the numpy fallback only")
    print(f"{'kernel':22s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng).items():
        times = []
        for n in names:
            k = backend(n)
            times.append(min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)))
        row = f"{label:22s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
