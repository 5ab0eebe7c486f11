"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_backends.py [--iters 30] [--out results.csv]

Times forward and backward for a few layer shapes on each backend,
single-threaded, and prints median/p10/p90 in microseconds plus the speedup
of the compiled kernels.
"""
import argparse
import sys
import time

import numpy as np

from cwmstream import ops

SHAPES = [
    # (cin, cout, size, kernel, stride)
    (8, 8, 32, 3, 1),
    (16, 16, 32, 3, 1),
    (32, 32, 32, 3, 1),
    (32, 64, 16, 3, 1),
    (64, 64, 32, 3, 1),
    (16, 32, 32, 1, 1),
    (16, 16, 32, 3, 2),
]


def timeit(fn, warmup, iters):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        out.append(time.perf_counter_ns() - t0)
    s = np.array(out) / 1e3
    return np.median(s), np.percentile(s, 10), np.percentile(s, 90)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=30)
    ap.add_argument("--warmup", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    try:
        backends = {"cython": ops.get_backend("cython"), "python": ops.get_backend("python")}
    except ImportError:
        sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    dt = np.dtype(args.dtype)
    rng = np.random.default_rng(0)
    rows = ["shape,op,backend,median_us,p10_us,p90_us,speedup"]
    for cin, cout, size, k, s in SHAPES:
        pad = k // 2
        x = rng.standard_normal((1, cin, size, size)).astype(dt)
        w = rng.standard_normal((cout, cin, k, k)).astype(dt)
        b = rng.standard_normal(cout).astype(dt)
        ho = ops.conv_output_size(size, k, s, pad)
        g = rng.standard_normal((1, cout, ho, ho)).astype(dt)
        tag = f"{cin}x{cout}x{size}k{k}s{s}"
        for op in ("forward", "backward"):
            res = {}
            for name, mod in backends.items():
                if op == "forward":
                    fn = lambda: mod.conv2d_forward(x, w, b, s, pad, 1)
                else:
                    fn = lambda: mod.conv2d_backward(g, x, w, s, pad, 1)
                res[name] = timeit(fn, args.warmup, args.iters)
            for name, (med, p10, p90) in res.items():
                speed = res["python"][0] / med
                rows.append(f"{tag},{op},{name},{med:.1f},{p10:.1f},{p90:.1f},{speed:.2f}")
    text = "\n".join(rows)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")


if __name__ == "__main__":
    main()
