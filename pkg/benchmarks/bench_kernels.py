"""Compare the numba and pure-numpy paths of the geometry/warping kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--n 10000]

The numba timings exclude compilation (one warm-up call first). Results of
both paths are checked for agreement before timing.
"""

import argparse
import time

import numpy as np

from mmhomog import _accel
from mmhomog.geometry import corner_points


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, size):
    rng = np.random.default_rng(0)
    src = np.broadcast_to(corner_points(128, 128), (n, 4, 2)).copy()
    dst = src + rng.uniform(-32, 32, (n, 4, 2))
    h, _ = _accel.dlt_batch(src, dst, use_numba=False)
    img = rng.random((1, size, size))
    m = h[0] * np.array([[1, 1, size / 128], [1, 1, size / 128], [1, 1, 1]])
    pts = rng.uniform(0, 127, (n, 64, 2))
    return {
        "dlt_batch": lambda nb: _accel.dlt_batch(src, dst, use_numba=nb)[0],
        "project": lambda nb: _accel.project(h, pts, use_numba=nb)[0],
        f"sample_projective {size}px": lambda nb: _accel.sample_projective(img, m, size, size, use_numba=nb),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000, help="homographies per batch")
    ap.add_argument("--size", type=int, default=256, help="image side for the sampler")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy path can run")
    print(f"{'kernel':28s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>9s}")
    for name, fn in cases(args.n, args.size).items():
        ref = fn(False)
        t_np = best_of(lambda: fn(False), args.repeat)
        if _accel.HAVE_NUMBA:
            got = fn(True)  # also triggers compilation
            np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9, equal_nan=True)
            t_nb = best_of(lambda: fn(True), args.repeat)
            print(f"{name:28s} {t_np * 1e3:12.3f} {t_nb * 1e3:12.3f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{name:28s} {t_np * 1e3:12.3f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
