"""Time the numpy and numba kernel backends on representative inputs.

Run: python3 benchmarks/bench_kernels.py [--repeats N] [--events N]

Also checks that both backends agree before timing them.
"""
import argparse
import time

import numpy as np

from flowspike import kernels


def _best(fn, repeats):
    fn()  # warm-up (triggers JIT compilation for numba)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n_events, height=128, width=128, seed=0):
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, width, n_events).astype(np.int64)
    ys = rng.integers(0, height, n_events).astype(np.int64)
    ps = rng.choice(np.array([-1, 1], dtype=np.int8), n_events)
    taus = np.sort(rng.random(n_events))
    wx = xs + rng.normal(0, 3, n_events)
    wy = ys + rng.normal(0, 3, n_events)
    gacc = rng.normal(size=(4, height, width))
    dcols = rng.normal(size=(height, width, 3, 3, 32)).astype(np.float32)

    def count(impl):
        out = np.zeros((2, height, width), dtype=np.float32)
        impl.count_accumulate(xs, ys, ps, out)
        return out

    def voxel(impl):
        out = np.zeros((6, height, width), dtype=np.float32)
        impl.voxel_accumulate(xs, ys, taus, ps, out)
        return out

    def splat(impl):
        return impl.splat_forward(wx, wy, taus, ps, height, width, np.float64)

    def splat_bw(impl):
        return np.stack(impl.splat_backward(wx, wy, taus, ps, gacc))

    def col2im(impl):
        out = np.zeros((height + 2, width + 2, 32), dtype=np.float32)
        impl.col2im(dcols, out)
        return out

    return {"count_accumulate": count, "voxel_accumulate": voxel, "splat_forward": splat,
            "splat_backward": splat_bw, "col2im": col2im}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--events", type=int, default=200_000)
    args = ap.parse_args(argv)
    if kernels.numba_impl is None:
        print("numba unavailable; only the numpy backend can run")
        return
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max|diff|")
    for name, fn in cases(args.events).items():
        a, b = fn(kernels.numpy_impl), fn(kernels.numba_impl)
        diff = float(np.max(np.abs(a - b)))
        t_np = _best(lambda: fn(kernels.numpy_impl), args.repeats)
        t_nb = _best(lambda: fn(kernels.numba_impl), args.repeats)
        print(f"{name:<18} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
