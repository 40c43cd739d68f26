"""Time each kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5]

The first numba call per kernel compiles (or loads the on-disk cache); it
runs once as warm-up outside the timed region.  Outputs of the two
backends are compared before timing, so the table doubles as a parity check.
"""

import argparse
import time

import numpy as np

from rdnkit import _backend, kernels
from rdnkit.geometry import ransac
from rdnkit.model import RdnConfig, describe, init_weights
from rdnkit.synth import random_texture


def _cases(rng):
    x = rng.standard_normal((64, 64, 32))
    xpad = np.pad(x, ((4, 4), (4, 4), (0, 0)))
    dcols = rng.standard_normal((64 * 64, 32 * 9))
    pooled = rng.standard_normal((4, 4, 32))
    a = rng.standard_normal((1000, 64))
    b = rng.standard_normal((1000, 64))
    img = random_texture(128, 3)
    hinv = np.array([[0.98, 0.05, 2.0], [-0.04, 1.01, -1.5], [1e-4, -2e-4, 1.0]])
    pts = rng.uniform(0, 128, (400, 2))
    dst = pts + np.array([3.0, -2.0])
    dst[200:] = rng.uniform(0, 128, (200, 2))
    cfg = RdnConfig.quarter()
    w = init_weights(cfg)
    image = random_texture(64, 5)
    return {
        "im2col 64x64x32 k3 d4": lambda: kernels.im2col(xpad, 64, 64, 3, 4),
        "col2im 64x64x32 k3 d4": lambda: kernels.col2im(dcols, 64, 64, 32, 3, 4, 4),
        "block_pool win 8": lambda: kernels.block_pool(x, 8, 8),
        "block_pool_backward win 8": lambda: kernels.block_pool_backward(pooled, 64, 64, 16, 16),
        "upsample 4x4 -> 64x64": lambda: kernels.upsample(pooled, 64, 64),
        "upsample_backward": lambda: kernels.upsample_backward(x, 4, 4),
        "sq_dists 1000x1000x64": lambda: kernels.sq_dists(a, b),
        "nearest 1000x1000x64": lambda: kernels.nearest(a, b),
        "warp 128x128": lambda: kernels.warp(img, hinv, 128, 128),
        "ransac homography 400 pts": lambda: ransac(pts, dst, "homography", seed=7),
        "describe quarter 64x64": lambda: describe(image, w, cfg),
    }


def _same(u, v):
    if isinstance(u, tuple):
        return all(_same(p, q) for p, q in zip(u, v))
    if hasattr(u, "inliers"):
        return np.array_equal(u.inliers, v.inliers) and np.allclose(u.model.m, v.model.m, atol=1e-9)
    return np.allclose(u, v, rtol=1e-12, atol=1e-12)


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    cases = _cases(np.random.default_rng(0))
    prev = _backend.get_backend()
    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  match")
    try:
        for name, fn in cases.items():
            res, times = {}, {}
            for backend in ("numba", "numpy"):
                _backend.set_backend(backend)
                res[backend] = fn()  # warm-up and parity sample
                times[backend] = _time(fn, args.repeat)
            ok = _same(res["numba"], res["numpy"])
            print(f"{name:<28}{1e3 * times['numba']:>10.3f}{1e3 * times['numpy']:>10.3f}"
                  f"{times['numpy'] / times['numba']:>8.1f}x  {'yes' if ok else 'NO'}")
    finally:
        _backend.set_backend(prev)


if __name__ == "__main__":
    main()
