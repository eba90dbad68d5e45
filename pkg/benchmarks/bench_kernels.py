"""Compare the numba and numpy kernel backends on the hot conv/pool shapes.

The shapes mirror one training step of the main 28x28 model: first conv
(1->16 channels, 4x4, stride 2), second conv (16->32, 4x4, stride 2), and an
overlapping 3x3/stride-2 max pool. Forward and backward are timed separately
and the outputs are cross-checked between backends.

Usage:
    python benchmarks/bench_kernels.py [--batch 64] [--repeats 20]

End-to-end training throughput under each backend is a separate experiment
because the backend binds at import time:
    ADVDA_BACKEND=numba python -c "..."   vs   ADVDA_BACKEND=numpy ...
"""

import argparse
import time

import numpy as np

from advda.kernels import numba_impl, numpy_impl


def timeit(fn, *args, repeats):
    fn(*args)  # warm-up; also triggers numba compilation
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn(*args)
    return (time.perf_counter() - t0) / repeats, out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.batch
    cases = [
        ("conv 1->16 4x4 s2 on 28x28", rng.random((n, 1, 28, 28)),
         rng.normal(size=(16, 1, 4, 4)), 2),
        ("conv 16->32 4x4 s2 on 13x13", rng.random((n, 16, 13, 13)),
         rng.normal(size=(32, 16, 4, 4)), 2),
    ]

    print(f"batch={n}, repeats={args.repeats}; times in ms")
    print(f"{'case':38s} {'numba':>8s} {'numpy':>8s} {'numpy/numba':>12s}")
    for name, x, w, stride in cases:
        ta, ya = timeit(numba_impl.conv2d_forward, x, w, stride, repeats=args.repeats)
        tb, yb = timeit(numpy_impl.conv2d_forward, x, w, stride, repeats=args.repeats)
        assert np.allclose(ya, yb, atol=1e-10)
        print(f"{name + ' fwd':38s} {ta*1e3:8.2f} {tb*1e3:8.2f} {tb/ta:12.2f}")

        g = rng.normal(size=ya.shape)
        ta, (gxa, gwa) = timeit(numba_impl.conv2d_backward, x, w, g, stride,
                                repeats=args.repeats)
        tb, (gxb, gwb) = timeit(numpy_impl.conv2d_backward, x, w, g, stride,
                                repeats=args.repeats)
        assert np.allclose(gxa, gxb, atol=1e-10) and np.allclose(gwa, gwb, atol=1e-10)
        print(f"{name + ' bwd':38s} {ta*1e3:8.2f} {tb*1e3:8.2f} {tb/ta:12.2f}")

    x = rng.random((n, 32, 13, 13))
    ta, (pa, aya, axa) = timeit(numba_impl.maxpool_forward, x, 3, 3, 2,
                                repeats=args.repeats)
    tb, (pb, ayb, axb) = timeit(numpy_impl.maxpool_forward, x, 3, 3, 2,
                                repeats=args.repeats)
    assert np.array_equal(pa, pb)
    print(f"{'maxpool 3x3 s2 fwd':38s} {ta*1e3:8.2f} {tb*1e3:8.2f} {tb/ta:12.2f}")
    g = rng.normal(size=pa.shape)
    ta, gxa = timeit(numba_impl.maxpool_backward, g, aya, axa, 13, 13,
                     repeats=args.repeats)
    tb, gxb = timeit(numpy_impl.maxpool_backward, g, ayb, axb, 13, 13,
                     repeats=args.repeats)
    assert np.allclose(gxa, gxb, atol=1e-12)
    print(f"{'maxpool 3x3 s2 bwd':38s} {ta*1e3:8.2f} {tb*1e3:8.2f} {tb/ta:12.2f}")


if __name__ == "__main__":
    main()
