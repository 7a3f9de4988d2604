"""Time the Cython and numpy im2col/col2im kernels on VQ-VAE-sized inputs.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``
"""

import argparse
import timeit

import numpy as np

from vqnorm.ndgrad import _kernels_py

try:
    from vqnorm.ndgrad import _kernels as _kernels_cy
except ImportError:
    _kernels_cy = None

# (batch, extent, channels, kernel, stride, pad): encoder input, first downsample, residual conv
CASES = [
    (8, 32, 1, 4, 2, 1),
    (8, 16, 32, 4, 2, 1),
    (8, 8, 32, 3, 1, 1),
]


def bench(module, case, repeat):
    n, e, c, k, s, p = case
    x = np.random.default_rng(0).standard_normal((n, e, e, e, c)).astype(np.float32)
    cols = module.im2col3d(x, k, s, p)
    t_fwd = min(timeit.repeat(lambda: module.im2col3d(x, k, s, p), number=1, repeat=repeat))
    t_bwd = min(timeit.repeat(lambda: module.col2im3d(cols, x.shape, k, s, p), number=1, repeat=repeat))
    return t_fwd, t_bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _kernels_cy is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'case':<28}{'op':<8}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for case in CASES:
        py = bench(_kernels_py, case, args.repeat)
        cy = bench(_kernels_cy, case, args.repeat) if _kernels_cy else (float("nan"),) * 2
        label = "n{} e{} c{} k{} s{} p{}".format(*case)
        for op, a, b in zip(("im2col", "col2im"), py, cy):
            print(f"{label:<28}{op:<8}{a * 1e3:>11.2f}{b * 1e3:>11.2f}{a / b:>8.1f}x")


if __name__ == "__main__":
    main()
