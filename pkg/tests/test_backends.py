"""The compiled and numpy kernels must agree on every input."""

import os
import subprocess
import sys

import numpy as np
import pytest

from rdnkit import _backend, kernels
from rdnkit.geometry import ransac
from rdnkit.model import RdnConfig, describe, init_weights
from rdnkit.synth import random_texture

pytestmark = pytest.mark.skipif(not _backend.HAVE_NUMBA, reason="numba not importable")


def both(fn):
    out = {}
    prev = _backend.get_backend()
    try:
        for name in ("numba", "numpy"):
            _backend.set_backend(name)
            out[name] = fn()
    finally:
        _backend.set_backend(prev)
    return out["numba"], out["numpy"]


def close(u, v, tol=1e-12):
    if isinstance(u, tuple):
        return all(close(p, q, tol) for p, q in zip(u, v))
    return np.allclose(u, v, rtol=tol, atol=tol)


R = np.random.default_rng(99)
X = R.standard_normal((23, 17, 5))
DCOLS = R.standard_normal((23 * 17, 5 * 9))

CASES = {
    "im2col": lambda: kernels.im2col(np.pad(X, ((2, 2), (2, 2), (0, 0))), 23, 17, 3, 2),
    "col2im": lambda: kernels.col2im(DCOLS, 23, 17, 5, 3, 2, 2),
    "block_pool": lambda: kernels.block_pool(X, 8, 4),
    "block_pool_backward": lambda: kernels.block_pool_backward(np.ones((3, 5, 5)), 23, 17, 8, 4),
    "upsample": lambda: kernels.upsample(X[:3, :4], 23, 17),
    "upsample_backward": lambda: kernels.upsample_backward(X, 3, 4),
    "sq_dists": lambda: kernels.sq_dists(X[0], X[1]),
    "nearest": lambda: kernels.nearest(X[0], X[1]),
    "warp": lambda: kernels.warp(X[..., :3], np.array([[0.9, 0.1, 1.5], [-0.1, 1.1, -2.0], [1e-3, 0, 1.0]]), 20, 19),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_kernel_parity(name):
    a, b = both(CASES[name])
    assert close(a, b)


def test_nearest_ties_go_to_lowest_index():
    a = np.zeros((1, 2))
    b = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    (i1, _), (i2, _) = both(lambda: kernels.nearest(a, b))
    assert i1[0] == i2[0] == 0


def test_describe_parity():
    cfg = RdnConfig.quarter()
    w = init_weights(cfg)
    img = random_texture(48, 1)
    a, b = both(lambda: describe(img, w, cfg))
    assert close(a, b, 1e-10)


@pytest.mark.parametrize("kind", ["homography", "fundamental"])
def test_ransac_parity(kind):
    rng = np.random.default_rng(3)
    src = rng.uniform(0, 100, (120, 2))
    if kind == "homography":
        h = np.array([[1.05, 0.02, 3.0], [-0.03, 0.97, -2.0], [1e-4, 2e-4, 1.0]])
        p = np.column_stack([src, np.ones(120)]) @ h.T
        dst = p[:, :2] / p[:, 2:]
    else:
        dst = src + np.column_stack([8 + 0.05 * src[:, 0], np.zeros(120)])
    dst[60:] = rng.uniform(0, 100, (60, 2))
    a, b = both(lambda: ransac(src, dst, kind, seed=7))
    assert np.array_equal(a.inliers, b.inliers)
    assert np.allclose(a.model.m, b.model.m, atol=1e-9)


def test_env_flag_selects_backend():
    env = dict(os.environ, RDN_BACKEND="numpy")
    code = "from rdnkit import _backend; print(_backend.get_backend())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["RDN_BACKEND"] = "cuda"
    bad = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert bad.returncode != 0 and "RDN_BACKEND" in bad.stderr
