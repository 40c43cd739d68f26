"""Synthetic training and evaluation pairs with exact ground truth.

A source image is warped by a seeded random homography and photometrically
jittered; correspondences are the grid points of the first image that land
inside the second.  :func:`flat_fixture` builds the two-flat-patches image
used to probe whether context makes flat regions matchable.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from rdnkit import kernels
from rdnkit.errors import ContractError, DegeneracyError, FixtureError
from rdnkit.geometry import HOMOGRAPHY, PlanarModel, canonical, dlt_homography, project
from rdnkit.matching import uniform_grid

PAIR_MARGIN = 16


@dataclass(frozen=True)
class WarpSpec:
    max_rotation: float = 15.0  # degrees
    max_scale_log: float = math.log(1.25)
    max_translation: float = 8.0  # pixels
    max_perspective: float = 0.05  # corner jitter, fraction of frame size
    brightness: float = 0.1
    contrast: float = 0.2
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("max_rotation", "max_scale_log", "max_translation", "max_perspective",
                     "brightness", "contrast", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ContractError(f"WarpSpec.{name} must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "WarpSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed)

    def with_seed(self, seed: int) -> "WarpSpec":
        return replace(self, seed=seed)


@dataclass
class TrainingPair:
    image1: np.ndarray
    image2: np.ndarray
    model: PlanarModel  # image1 -> image2
    correspondences: np.ndarray  # (N, 4) integer rows x1, y1, x2, y2
    valid_mask: np.ndarray

    @property
    def src(self) -> np.ndarray:
        return self.correspondences[:, :2]

    @property
    def dst(self) -> np.ndarray:
        return self.correspondences[:, 2:]


def _translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _draw_homography(spec, rng, h, w):
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(rng.uniform(-spec.max_rotation, spec.max_rotation))
    scale = math.exp(rng.uniform(-spec.max_scale_log, spec.max_scale_log))
    tx, ty = rng.uniform(-spec.max_translation, spec.max_translation, size=2)
    jitter = rng.uniform(-spec.max_perspective, spec.max_perspective, size=(4, 2)) * np.array([w, h])
    c, s = math.cos(theta), math.sin(theta)
    rs = np.array([[scale * c, -scale * s, 0.0], [scale * s, scale * c, 0.0], [0.0, 0.0, 1.0]])
    m = _translation(cx + tx, cy + ty) @ rs @ _translation(-cx, -cy)
    if spec.max_perspective > 0:
        corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        p = dlt_homography(corners, corners + jitter).m
        m = m @ (p / p[2, 2])
    return m


def random_homography(spec: WarpSpec, size=(64, 64), rng=None) -> PlanarModel:
    """Seeded rotation / log-uniform scale / translation / corner-jitter homography about the frame centre."""
    h, w = size
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    for _ in range(16):
        m = _draw_homography(spec, rng, h, w)
        z = corners @ m[2, :2] + m[2, 2]
        if np.all(z > 0) and abs(np.linalg.det(m / m[2, 2])) > 1e-6 and np.all(np.isfinite(m)):
            return PlanarModel(canonical(m), HOMOGRAPHY)
    raise DegeneracyError("could not draw an invertible homography in 16 attempts")


def inverse_matrix(m: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(m)
    return inv / inv[2, 2] if inv[2, 2] != 0 else inv


def warp_image(image: np.ndarray, model: PlanarModel, out_size=None):
    """Inverse-warp ``image`` by ``model``; returns (warped, valid mask)."""
    img = np.asarray(image, dtype=np.float64)
    if abs(np.linalg.det(model.m)) < 1e-15:
        raise ContractError("cannot warp by a singular homography")
    h, w = img.shape[:2] if out_size is None else out_size
    return kernels.warp(img, inverse_matrix(model.m), h, w)


def make_pair(image: np.ndarray, spec: WarpSpec, grid_stride: int = 8, model: PlanarModel | None = None,
              margin: int = PAIR_MARGIN) -> TrainingPair:
    """Warp + jitter ``image`` into a second view and collect grid correspondences.

    ``model`` overrides the random draw (the photometric jitter still uses
    ``spec``).  Targets are rounded to the nearest pixel.
    """
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape[:2]
    rng = np.random.default_rng(spec.seed)
    if model is None:
        model = random_homography(spec, (h, w), rng)
    warped, mask = warp_image(img, model)
    gain = 1.0 + rng.uniform(-spec.contrast, spec.contrast)
    bias = rng.uniform(-spec.brightness, spec.brightness)
    noise = rng.standard_normal(warped.shape) * spec.noise_sigma
    img2 = np.where(mask[..., None], np.clip(gain * warped + bias + noise, 0.0, 1.0), 0.0)

    p1 = uniform_grid(h, w, grid_stride, margin)
    proj = project(model.m, p1)
    p2 = np.rint(proj)
    ok = np.all(np.isfinite(proj), axis=1)
    ok &= (proj[:, 0] >= 0) & (proj[:, 0] <= w - 1) & (proj[:, 1] >= 0) & (proj[:, 1] <= h - 1)
    p2i = np.where(ok[:, None], p2, 0).astype(np.int64)
    ok &= mask[p2i[:, 1], p2i[:, 0]]
    corr = np.concatenate([p1[ok], p2i[ok]], axis=1).astype(np.int64)
    if corr.shape[0] == 0:
        raise FixtureError("no correspondence survives the warp")
    return TrainingPair(img, img2, model, corr, mask)


def verify_pair(pair: TrainingPair, tol: float = 0.5) -> float:
    """Largest per-axis rounding residual of the stored correspondences."""
    if pair.correspondences.shape[0] == 0:
        return 0.0
    proj = project(pair.model.m, pair.src)
    return float(np.max(np.abs(proj - pair.dst)))


# ---------------------------------------------------------------------------
# procedural images
# ---------------------------------------------------------------------------


def _value_noise(rng, h, w, cells):
    grid = rng.random((cells + 1, cells + 1, 3))
    return kernels.upsample(grid, h, w)


def random_texture(size: int = 64, seed: int = 0, width: int | None = None) -> np.ndarray:
    """Colourful multi-scale texture in [0, 1]: value noise plus random shapes."""
    h, w = size, size if width is None else width
    rng = np.random.default_rng(seed)
    img = np.zeros((h, w, 3))
    amp = 0.5
    for cells in (2, 5, 11, 23):
        img += amp * (_value_noise(rng, h, w, max(1, cells * max(h, w) // 64)) - 0.5)
        amp *= 0.7
    img += 0.5
    ys, xs = np.mgrid[0:h, 0:w]
    n_shapes = max(6, h * w // 256)
    for _ in range(n_shapes):
        color = rng.random(3)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(2, 10) * max(1.0, min(h, w) / 64)
        kind = rng.integers(3)
        if kind == 0:
            sel = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        elif kind == 1:
            sel = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= rng.uniform(1, r))
        else:
            ang = rng.uniform(0, math.pi)
            d = np.abs((xs - cx) * math.sin(ang) - (ys - cy) * math.cos(ang))
            sel = (d <= rng.uniform(0.7, 2.0)) & ((xs - cx) ** 2 + (ys - cy) ** 2 <= 4 * r * r)
        img[sel] = color
    return np.clip(img, 0.0, 1.0)


def patchy_texture(size: int = 256, seed: int = 0, n_patches: int | None = None) -> np.ndarray:
    """:func:`random_texture` with constant grey rectangles pasted in.

    Gives training crops whose flat interiors can only be told apart by
    their surroundings.
    """
    rng = np.random.default_rng(seed)
    img = random_texture(size, int(rng.integers(2**31)))
    n = max(1, size * size // 2048) if n_patches is None else n_patches
    for _ in range(n):
        ph, pw = rng.integers(12, max(13, size // 5), size=2)
        y0 = int(rng.integers(0, size - ph))
        x0 = int(rng.integers(0, size - pw))
        img[y0:y0 + ph, x0:x0 + pw] = rng.uniform(0.2, 0.8)
    return img


FLAT_LEVEL = 0.5


def flat_layout(size: int):
    """Rectangles ``(y0, y1, x0, x1)`` of the two flat patches and the band width."""
    band = max(4, size // 20)
    y0, y1 = round(0.2 * size), round(0.8 * size)
    left = (y0, y1, round(0.1 * size), round(0.45 * size))
    right = (y0, y1, round(0.55 * size), round(0.9 * size))
    return left, right, band


def _stripes(rng, ys, xs):
    ang = rng.uniform(0, math.pi)
    period = rng.uniform(4, 8)
    phase = np.cos(ang) * xs + np.sin(ang) * ys
    t = 0.5 + 0.5 * np.sin(2 * math.pi * phase / period)
    c0, c1 = rng.random(3), rng.random(3)
    return c0 + t[..., None] * (c1 - c0)


def _checks(rng, ys, xs):
    period = int(rng.integers(3, 7))
    t = ((ys // period + xs // period) % 2).astype(np.float64)
    c0, c1 = rng.random(3), rng.random(3)
    return c0 + t[..., None] * (c1 - c0)


def flat_fixture(size: int = 128, seed: int = 0) -> np.ndarray:
    """Two identical flat grey patches framed by different textures on a textured background.

    Points deep inside either patch see only the constant grey in a small
    neighbourhood, so they are locally indistinguishable; the frames differ,
    so a wide enough context tells them apart.
    """
    if size < 64:
        raise ContractError(f"flat fixture needs size >= 64, got {size}")
    rng = np.random.default_rng(seed)
    img = random_texture(size, int(rng.integers(2**31)))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    left, right, band = flat_layout(size)
    for rect, pattern in ((left, _stripes), (right, _checks)):
        y0, y1, x0, x1 = rect
        frame = pattern(rng, ys, xs)
        sl = (slice(max(0, y0 - band), y1 + band), slice(max(0, x0 - band), x1 + band))
        img[sl] = frame[sl]
        img[y0:y1, x0:x1] = FLAT_LEVEL
    return np.clip(img, 0.0, 1.0)


def gradient_energy(image: np.ndarray, radius: int = 4) -> np.ndarray:
    """Mean gradient magnitude of the grey image over a (2r+1)^2 window, per pixel."""
    grey = np.asarray(image, dtype=np.float64)
    if grey.ndim == 3:
        grey = grey.mean(axis=2)
    gy, gx = np.gradient(grey)
    mag = np.hypot(gx, gy)
    k = 2 * radius + 1
    padded = np.pad(mag, radius, mode="constant")
    cnt = np.pad(np.ones_like(mag), radius, mode="constant")
    s = np.cumsum(np.cumsum(np.pad(padded, ((1, 0), (1, 0))), 0), 1)
    c = np.cumsum(np.cumsum(np.pad(cnt, ((1, 0), (1, 0))), 0), 1)
    h, w = mag.shape
    box = s[k:k + h, k:k + w] - s[:h, k:k + w] - s[k:k + h, :w] + s[:h, :w]
    n = c[k:k + h, k:k + w] - c[:h, k:k + w] - c[k:k + h, :w] + c[:h, :w]
    return box / n
