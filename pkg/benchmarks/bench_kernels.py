"""Time the compiled and numpy network kernels on training-sized batches.

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import timeit

import numpy as np

from smpo_lab.kernels import TANH, get_backend


def make_net(width, depth, d_in, d_out, rng):
    sizes = [d_in] + [width] * depth + [d_out]
    ws = [rng.normal(size=(a, b)) / np.sqrt(a) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    return ws, bs


def bench(backend, ws, bs, x, repeats):
    fwd = lambda: backend.mlp_forward(ws, bs, x, TANH)  # noqa: E731
    out, cache = fwd()
    g = np.ones_like(out)
    bwd = lambda: backend.mlp_backward(ws, cache, g, TANH, True)  # noqa: E731
    t_f = min(timeit.repeat(fwd, number=repeats, repeat=3)) / repeats
    t_b = min(timeit.repeat(bwd, number=repeats, repeat=3)) / repeats
    return t_f * 1e6, t_b * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    try:
        backends = {"python": get_backend("python"), "cython": get_backend("cython")}
    except ImportError:
        backends = {"python": get_backend("python")}
        print("compiled extension not built; timing the numpy kernels only")
    print(f"{'batch':>6} {'width':>6} " + " ".join(
        f"{n + ' fwd us':>14} {n + ' bwd us':>14}" for n in backends) + "  speedup")
    for batch, width in [(1, 64), (16, 64), (256, 64), (2048, 64), (256, 256)]:
        ws, bs = make_net(width, 3, 20, 2, rng)
        x = rng.normal(size=(batch, 20))
        times = {n: bench(b, ws, bs, x, args.repeats) for n, b in backends.items()}
        row = " ".join(f"{f:14.1f} {b:14.1f}" for f, b in times.values())
        speed = ""
        if "cython" in times:
            speed = f"{sum(times['python']) / sum(times['cython']):8.2f}x"
        print(f"{batch:6d} {width:6d} {row}  {speed}")


if __name__ == "__main__":
    main()
