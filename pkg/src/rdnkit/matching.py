"""Uniform-grid keypoints, nearest-neighbour matching and match accuracy."""

import math
from dataclasses import dataclass

import numpy as np

from rdnkit import kernels
from rdnkit.errors import ContractError


@dataclass(frozen=True)
class Match:
    idx_a: int
    idx_b: int
    distance: float


def uniform_grid(h: int, w: int, stride: int = 8, margin: int = 16) -> np.ndarray:
    """Keypoints ``(x, y)`` on a regular lattice, row-major.

    Coordinates run ``margin, margin + stride, ...`` while staying below
    ``size - margin``.  An empty band gives an empty ``(0, 2)`` array.
    """
    if stride <= 0:
        raise ContractError(f"stride must be positive, got {stride}")
    if margin < 0:
        raise ContractError(f"margin must be non-negative, got {margin}")
    ys = np.arange(margin, h - margin, stride)
    xs = np.arange(margin, w - margin, stride)
    if ys.size == 0 or xs.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.int64)


def _check_pair(desc_a, desc_b):
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("descriptor lists must be non-empty 2-D arrays")
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def mutual_nn_match(desc_a, desc_b, mutual: bool = True, ratio: float | None = None) -> list:
    """Nearest-neighbour matches from A to B, sorted by ``idx_a``.

    With ``mutual`` a pair is kept only when each side is the other's
    nearest neighbour.  ``ratio`` additionally applies Lowe's test
    (best / second-best distance below ``ratio``).  Ties resolve to the
    lowest index.
    """
    a, b = _check_pair(desc_a, desc_b)
    ab, d2 = kernels.nearest(a, b)
    keep = np.ones(a.shape[0], dtype=bool)
    if mutual:
        ba, _ = kernels.nearest(b, a)
        keep &= ba[ab] == np.arange(a.shape[0])
    if ratio is not None and b.shape[0] > 1:
        d = kernels.sq_dists(a, b)
        second = np.partition(d, 1, axis=1)[:, 1]
        keep &= np.sqrt(d2) < ratio * np.sqrt(second)
    return [Match(int(i), int(ab[i]), math.sqrt(d2[i])) for i in np.flatnonzero(keep)]


def project(h: np.ndarray, pts) -> np.ndarray:
    """Apply a 3x3 homography to (N, 2) points."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    z = p @ h[:, :2].T + h[:, 2]
    return z[:, :2] / z[:, 2:3]


@dataclass
class AccuracyReport:
    thresholds: tuple
    accuracy: tuple
    n_matches: int
    empty: bool

    def as_dict(self) -> dict:
        return dict(zip(self.thresholds, self.accuracy))


def match_errors(matches, kps_a, kps_b, true_h) -> np.ndarray:
    true_h = np.asarray(true_h, dtype=np.float64)
    if abs(np.linalg.det(true_h)) < 1e-12 * max(1.0, np.abs(true_h).max() ** 3):
        raise ContractError("ground-truth homography is singular")
    if not matches:
        return np.empty(0)
    ia = np.array([m.idx_a for m in matches])
    ib = np.array([m.idx_b for m in matches])
    pa = project(true_h, np.asarray(kps_a, dtype=np.float64)[ia])
    pb = np.asarray(kps_b, dtype=np.float64)[ib]
    return np.linalg.norm(pa - pb, axis=1)


def matching_accuracy(matches, kps_a, kps_b, true_h, thresholds=(1, 3, 5)) -> AccuracyReport:
    """Fraction of matches whose ground-truth reprojection error is within each threshold."""
    err = match_errors(matches, kps_a, kps_b, true_h)
    th = tuple(float(t) for t in thresholds)
    if err.size == 0:
        return AccuracyReport(th, tuple(0.0 for _ in th), 0, True)
    return AccuracyReport(th, tuple(float(np.mean(err <= t)) for t in th), int(err.size), False)
