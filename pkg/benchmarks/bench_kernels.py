"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--size N] [--repeat R]

Prints one row per kernel: best-of-R wall time for each backend and the
speedup of the compiled one. Without a built extension only the numpy
column is filled.
"""

import argparse
import timeit

import numpy as np

from bcde import _kernels

UNARY = ("softplus", "sigmoid", "relu")
BINARY = ("relu_backward", "softplus_backward", "sigmoid_backward", "tanh_backward")


def _cases(n, rng):
    x = rng.normal(size=(n // 256, 256))
    g = rng.normal(size=x.shape)
    s = 1 / (1 + np.exp(-x))
    args = {name: (x,) for name in UNARY}
    args.update(relu_backward=(x, g), softplus_backward=(x, g), sigmoid_backward=(s, g),
                tanh_backward=(np.tanh(x), g), logmeanexp=(rng.normal(size=(100, n // 100)),))
    return args


def _best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=5, repeat=repeat)) / 5


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=1_000_000, help="elements per call")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    compiled = _kernels.impl if _kernels.BACKEND != _kernels.fallback.BACKEND else None
    print(f"active backend: {_kernels.BACKEND}, {args.size} elements")
    print(f"{'kernel':<20}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, a in _cases(args.size, rng).items():
        t_np = _best(getattr(_kernels.fallback, name), a, args.repeat)
        if compiled is None:
            print(f"{name:<20}{t_np * 1e3:>12.2f}{'-':>14}{'-':>10}")
            continue
        ref, got = getattr(_kernels.fallback, name)(*a), getattr(compiled, name)(*a)
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-300)
        t_c = _best(getattr(compiled, name), a, args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.2f}{t_c * 1e3:>14.2f}{t_np / t_c:>9.2f}x")


if __name__ == "__main__":
    main()
