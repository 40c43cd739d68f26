"""Two-view geometry and RANSAC screening.

Null vectors come from a one-sided (Hestenes) Jacobi SVD applied to the
design matrix; the sizes here (9 unknowns) make that cheap and it keeps the
solver self-contained and easy to compile with numba.
"""

import math
from dataclasses import dataclass

import numpy as np

from rdnkit import _backend
from rdnkit._backend import njit
from rdnkit.errors import ContractError, DegeneracyError, NoConsensusError

HOMOGRAPHY = "homography"
FUNDAMENTAL = "fundamental"
_KIND_CODE = {HOMOGRAPHY: 0, FUNDAMENTAL: 1}
MIN_SAMPLE = {HOMOGRAPHY: 4, FUNDAMENTAL: 8}
DEFAULT_THRESHOLD = {HOMOGRAPHY: 3.0, FUNDAMENTAL: 1.0}


@dataclass
class PlanarModel:
    m: np.ndarray
    kind: str = HOMOGRAPHY

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if self.kind not in _KIND_CODE:
            raise ContractError(f"unknown model kind {self.kind!r}")

    def project(self, pts) -> np.ndarray:
        if self.kind != HOMOGRAPHY:
            raise ContractError("only homographies map points to points")
        return project(self.m, pts)

    def inverse(self) -> "PlanarModel":
        return PlanarModel(canonical(np.linalg.inv(self.m)), self.kind)


def project(m, pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    z = p @ m[:, :2].T + m[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return z[:, :2] / z[:, 2:3]


def canonical(m: np.ndarray) -> np.ndarray:
    """Unit Frobenius norm, largest-magnitude entry positive."""
    m = np.asarray(m, dtype=np.float64)
    m = m / np.linalg.norm(m)
    k = np.argmax(np.abs(m))
    return m if m.flat[k] > 0 else -m


# ---------------------------------------------------------------------------
# Jacobi SVD (shared source: plain python and numba)
# ---------------------------------------------------------------------------


def _jacobi(a, tol, max_sweeps):
    n = a.shape[1]
    g = np.ascontiguousarray(a.T).copy()
    vt = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = np.dot(g[p], g[p])
                beta = np.dot(g[q], g[q])
                gamma = np.dot(g[p], g[q])
                if abs(gamma) <= max(tol * math.sqrt(alpha * beta), 1e-290):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                gp = g[p].copy()
                g[p] = c * gp - s * g[q]
                g[q] = s * gp + c * g[q]
                vp = vt[p].copy()
                vt[p] = c * vp - s * vt[q]
                vt[q] = s * vp + c * vt[q]
        if not rotated:
            break
    norms = np.sqrt(np.sum(g * g, axis=1))
    order = np.argsort(-norms)
    return norms[order], vt[order], g[order]


_jacobi_nb = njit(_jacobi)


def jacobi_svd(a, tol: float = 1e-12, max_sweeps: int = 60):
    """Singular values (descending), right singular vectors as rows, and A V.

    Column pairs are rotated until every pair is orthogonal to ``tol``
    relative to the product of their norms.  Row ``i`` of the third result
    equals ``s[i] * u_i``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if _backend.use_numba():
        return _jacobi_nb(a, tol, max_sweeps)
    return _jacobi(a, tol, max_sweeps)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def normalize_points(points):
    """Similarity moving the centroid to the origin with mean radius sqrt(2).

    Returns ``(normalized_points, T)`` with ``normalized = T @ [x, y, 1]``.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] < 2:
        raise DegeneracyError("need at least two points to normalise")
    c = p.mean(axis=0)
    d = np.mean(np.sqrt(np.sum((p - c) ** 2, axis=1)))
    if not d > 0:
        raise DegeneracyError("all points coincide")
    s = math.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (p - c) * s, t


def _similarity_inverse(t):
    s = t[0, 0]
    return np.array([[1.0 / s, 0.0, -t[0, 2] / s], [0.0, 1.0 / s, -t[1, 2] / s], [0.0, 0.0, 1.0]])


def _pairs(src, dst, minimum, what):
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ContractError(f"{what}: point lists differ in length ({len(src)} vs {len(dst)})")
    if src.shape[0] < minimum:
        raise ContractError(f"{what} needs at least {minimum} point pairs, got {src.shape[0]}")
    return src, dst


def _homography_rows(a, b):
    n = a.shape[0]
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    o, z = np.ones(n), np.zeros(n)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=1)
    return np.stack([r1, r2], axis=1).reshape(2 * n, 9)


def dlt_homography(src, dst, normalize: bool = True) -> PlanarModel:
    """Least-squares homography ``dst ~ H src`` from >= 4 pairs."""
    src, dst = _pairs(src, dst, 4, "dlt_homography")
    if normalize:
        a, t1 = normalize_points(src)
        b, t2 = normalize_points(dst)
    else:
        a, b, t1, t2 = src, dst, np.eye(3), np.eye(3)
    s, vt, _ = jacobi_svd(_homography_rows(a, b))
    if s[7] <= 1e-8 * s[0]:
        raise DegeneracyError("point configuration does not determine a homography")
    h = vt[8].reshape(3, 3)
    h = _similarity_inverse(t2) @ h @ t1 if normalize else h
    if abs(np.linalg.det(h / np.linalg.norm(h))) < 1e-12:
        raise DegeneracyError("estimated homography is singular")
    return PlanarModel(canonical(h), HOMOGRAPHY)


def eight_point_fundamental(src, dst) -> PlanarModel:
    """Normalised eight-point estimate with the rank-2 constraint enforced."""
    src, dst = _pairs(src, dst, 8, "eight_point_fundamental")
    a, t1 = normalize_points(src)
    b, t2 = normalize_points(dst)
    rows = np.stack([b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0],
                     b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1],
                     a[:, 0], a[:, 1], np.ones(len(a))], axis=1)
    s, vt, _ = jacobi_svd(rows)
    if s[7] <= 1e-8 * s[0]:
        raise DegeneracyError("point configuration does not determine a fundamental matrix")
    f = vt[8].reshape(3, 3)
    _, fvt, fg = jacobi_svd(f)
    f2 = np.outer(fg[0], fvt[0]) + np.outer(fg[1], fvt[1])
    return PlanarModel(canonical(t2.T @ f2 @ t1), FUNDAMENTAL)


def sampson_distance(model: PlanarModel, src, dst):
    """First-order epipolar error; scalar for one pair, array for many."""
    if model.kind != FUNDAMENTAL:
        raise ContractError("sampson_distance needs a fundamental matrix")
    a = np.asarray(src, dtype=np.float64)
    single = a.ndim == 1
    a = a.reshape(-1, 2)
    b = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    err = _sampson(model.m, a, b)
    if np.any(~np.isfinite(err)):
        raise DegeneracyError("Sampson denominator vanishes for this pair")
    return float(err[0]) if single else err


def _sampson(f, a, b):
    x1 = np.column_stack([a, np.ones(len(a))])
    x2 = np.column_stack([b, np.ones(len(b))])
    fx1 = x1 @ f.T
    ftx2 = x2 @ f
    num = np.sum(x2 * fx1, axis=1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, np.inf)


def _sq_reprojection(h, a, b):
    p = project(h, a)
    e = np.sum((p - b) ** 2, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def residuals(model: PlanarModel, src, dst) -> np.ndarray:
    """Squared reprojection error (homography) or Sampson distance (fundamental)."""
    a = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if model.kind == HOMOGRAPHY:
        return _sq_reprojection(model.m, a, b)
    return _sampson(model.m, a, b)


def _fit(kind, a, b):
    return dlt_homography(a, b) if kind == HOMOGRAPHY else eight_point_fundamental(a, b)


# ---------------------------------------------------------------------------
# seeded sampling
# ---------------------------------------------------------------------------

GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def sample_table(seed: int, iterations: int, n: int, size: int) -> np.ndarray:
    """Minimal samples for every RANSAC iteration, shape ``(iterations, size)``.

    Iteration ``i`` owns the stream ``state = mix64(mix64(seed) ^ (i * GOLDEN))``,
    advanced by ``state += GOLDEN`` and read through ``mix64(state)``.  Draw
    ``j`` takes rank ``r = out mod (n - j)`` among the indices not yet
    chosen, so rows hold distinct indices and never depend on each other.
    """
    it = np.arange(iterations, dtype=np.uint64)
    state = mix64(mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)) ^ (it * GOLDEN))
    out = np.empty((iterations, size), dtype=np.int64)
    for j in range(size):
        state = state + GOLDEN
        r = (mix64(state) % np.uint64(n - j)).astype(np.int64)
        chosen = np.sort(out[:, :j], axis=1)
        for t in range(j):
            r = r + (r >= chosen[:, t])
        out[:, j] = r
    return out


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------


@dataclass
class RansacResult:
    model: PlanarModel
    inliers: np.ndarray
    iterations: int


def _needed_iterations(count, n, s, confidence, cap):
    w = count / n
    ws = w ** s
    if ws >= 1.0:
        return 1
    if ws <= 0.0:
        return cap
    k = math.log(1.0 - confidence) / math.log(1.0 - ws)
    return min(cap, max(1, int(math.ceil(k))))


def _collinear(p):
    n = p.shape[0]
    span = (p[:, 0].max() - p[:, 0].min()) ** 2 + (p[:, 1].max() - p[:, 1].min()) ** 2
    scale = 1e-9 * span + 1e-300
    for i in range(n - 2):
        for j in range(i + 1, n - 1):
            for k in range(j + 1, n):
                cross = ((p[j, 0] - p[i, 0]) * (p[k, 1] - p[i, 1])
                         - (p[j, 1] - p[i, 1]) * (p[k, 0] - p[i, 0]))
                if abs(cross) <= scale:
                    return True
    return False


_collinear_nb = njit(_collinear)


def _ransac_np(src, dst, kind, thr2, table, confidence):
    n, s = src.shape[0], table.shape[1]
    best, best_count, needed, ran = None, -1, table.shape[0], 0
    for i in range(table.shape[0]):
        if i >= needed:
            break
        ran = i + 1
        idx = table[i]
        if kind == HOMOGRAPHY and (_collinear(src[idx]) or _collinear(dst[idx])):
            continue
        try:
            model = _fit(kind, src[idx], dst[idx])
        except DegeneracyError:
            continue
        mask = residuals(model, src, dst) <= thr2
        count = int(mask.sum())
        if count > best_count:
            best, best_count = mask, count
            needed = _needed_iterations(count, n, s, confidence, table.shape[0])
    if best is None:
        best = np.zeros(n, dtype=bool)
    return best, ran


def ransac(src, dst, kind: str = HOMOGRAPHY, threshold: float | None = None,
           max_iterations: int = 2000, seed: int = 0, confidence: float = 0.99) -> RansacResult:
    """Seeded RANSAC with adaptive termination and a final refit on the inliers.

    ``threshold`` is in pixels: reprojection distance for homographies, and
    for fundamental matrices it bounds the Sampson error by ``threshold**2``
    (Sampson distance is a squared quantity).
    """
    if kind not in _KIND_CODE:
        raise ContractError(f"unknown model kind {kind!r}")
    s = MIN_SAMPLE[kind]
    src, dst = _pairs(src, dst, s, f"ransac ({kind})")
    thr = DEFAULT_THRESHOLD[kind] if threshold is None else float(threshold)
    if thr <= 0 or max_iterations < 1:
        raise ContractError("threshold and max_iterations must be positive")
    thr2 = thr * thr
    table = sample_table(seed, max_iterations, src.shape[0], s)
    if _backend.use_numba():
        mask, ran = _ransac_nb(src, dst, _KIND_CODE[kind], thr2, table, confidence)
    else:
        mask, ran = _ransac_np(src, dst, kind, thr2, table, confidence)
    if mask.sum() < s + 1:
        raise NoConsensusError(f"no {kind} supported by more than {s} matches")

    model = _fit(kind, src[mask], dst[mask])
    for _ in range(10):
        new = residuals(model, src, dst) <= thr2
        if np.array_equal(new, mask) or new.sum() < s:
            break
        try:
            candidate = _fit(kind, src[new], dst[new])
        except DegeneracyError:
            break
        mask, model = new, candidate
    final = np.flatnonzero(residuals(model, src, dst) <= thr2)
    return RansacResult(model, final, ran)


# ---------------------------------------------------------------------------
# compiled RANSAC loop (mirrors _ransac_np and the estimators above)
# ---------------------------------------------------------------------------


@njit
def _hartley_nb(p):
    n = p.shape[0]
    cx = p[:, 0].mean()
    cy = p[:, 1].mean()
    d = 0.0
    for i in range(n):
        d += math.sqrt((p[i, 0] - cx) ** 2 + (p[i, 1] - cy) ** 2)
    d /= n
    t = np.eye(3)
    if not d > 0.0:
        return t, False
    s = math.sqrt(2.0) / d
    t[0, 0] = s
    t[1, 1] = s
    t[0, 2] = -s * cx
    t[1, 2] = -s * cy
    return t, True


@njit
def _apply_nb(t, p):
    out = np.empty_like(p)
    for i in range(p.shape[0]):
        out[i, 0] = t[0, 0] * p[i, 0] + t[0, 2]
        out[i, 1] = t[1, 1] * p[i, 1] + t[1, 2]
    return out


@njit
def _det3_nb(m):
    return (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))


@njit
def _fit_h_nb(src, dst):
    t1, ok1 = _hartley_nb(src)
    t2, ok2 = _hartley_nb(dst)
    h = np.zeros((3, 3))
    if not (ok1 and ok2):
        return h, False
    a = _apply_nb(t1, src)
    b = _apply_nb(t2, dst)
    n = a.shape[0]
    rows = np.zeros((2 * n, 9))
    for i in range(n):
        x, y, u, v = a[i, 0], a[i, 1], b[i, 0], b[i, 1]
        r = 2 * i
        rows[r, 0] = -x
        rows[r, 1] = -y
        rows[r, 2] = -1.0
        rows[r, 6] = u * x
        rows[r, 7] = u * y
        rows[r, 8] = u
        rows[r + 1, 3] = -x
        rows[r + 1, 4] = -y
        rows[r + 1, 5] = -1.0
        rows[r + 1, 6] = v * x
        rows[r + 1, 7] = v * y
        rows[r + 1, 8] = v
    s, vt, _ = _jacobi_nb(rows, 1e-12, 60)
    if s[7] <= 1e-8 * s[0]:
        return h, False
    hn = vt[8].copy().reshape((3, 3))
    inv2 = np.eye(3)
    inv2[0, 0] = 1.0 / t2[0, 0]
    inv2[1, 1] = 1.0 / t2[1, 1]
    inv2[0, 2] = -t2[0, 2] / t2[0, 0]
    inv2[1, 2] = -t2[1, 2] / t2[1, 1]
    h = inv2 @ hn @ t1
    h = h / math.sqrt(np.sum(h * h))
    if abs(_det3_nb(h)) < 1e-12:
        return h, False
    return h, True


@njit
def _fit_f_nb(src, dst):
    t1, ok1 = _hartley_nb(src)
    t2, ok2 = _hartley_nb(dst)
    f = np.zeros((3, 3))
    if not (ok1 and ok2):
        return f, False
    a = _apply_nb(t1, src)
    b = _apply_nb(t2, dst)
    n = a.shape[0]
    rows = np.empty((n, 9))
    for i in range(n):
        x, y, u, v = a[i, 0], a[i, 1], b[i, 0], b[i, 1]
        rows[i, 0] = u * x
        rows[i, 1] = u * y
        rows[i, 2] = u
        rows[i, 3] = v * x
        rows[i, 4] = v * y
        rows[i, 5] = v
        rows[i, 6] = x
        rows[i, 7] = y
        rows[i, 8] = 1.0
    s, vt, _ = _jacobi_nb(rows, 1e-12, 60)
    if s[7] <= 1e-8 * s[0]:
        return f, False
    fn = vt[8].copy().reshape((3, 3))
    _, fvt, fg = _jacobi_nb(fn, 1e-12, 60)
    f2 = np.outer(fg[0], fvt[0]) + np.outer(fg[1], fvt[1])
    f = t2.T @ f2 @ t1
    return f / math.sqrt(np.sum(f * f)), True


@njit
def _residuals_nb(m, src, dst, kind):
    n = src.shape[0]
    out = np.empty(n)
    for i in range(n):
        x, y, u, v = src[i, 0], src[i, 1], dst[i, 0], dst[i, 1]
        if kind == 0:
            zx = m[0, 0] * x + m[0, 1] * y + m[0, 2]
            zy = m[1, 0] * x + m[1, 1] * y + m[1, 2]
            zw = m[2, 0] * x + m[2, 1] * y + m[2, 2]
            if zw == 0.0:
                out[i] = np.inf
            else:
                out[i] = (zx / zw - u) ** 2 + (zy / zw - v) ** 2
        else:
            f0 = m[0, 0] * x + m[0, 1] * y + m[0, 2]
            f1 = m[1, 0] * x + m[1, 1] * y + m[1, 2]
            f2 = m[2, 0] * x + m[2, 1] * y + m[2, 2]
            g0 = m[0, 0] * u + m[1, 0] * v + m[2, 0]
            g1 = m[0, 1] * u + m[1, 1] * v + m[2, 1]
            num = (u * f0 + v * f1 + f2) ** 2
            den = f0 * f0 + f1 * f1 + g0 * g0 + g1 * g1
            out[i] = num / den if den > 0.0 else np.inf
    return out


@njit
def _ransac_nb(src, dst, kind, thr2, table, confidence):
    n = src.shape[0]
    iters, s = table.shape
    best = np.zeros(n, dtype=np.bool_)
    best_count = -1
    needed = iters
    ran = 0
    a = np.empty((s, 2))
    b = np.empty((s, 2))
    for i in range(iters):
        if i >= needed:
            break
        ran = i + 1
        for j in range(s):
            a[j] = src[table[i, j]]
            b[j] = dst[table[i, j]]
        if kind == 0:
            if _collinear_nb(a) or _collinear_nb(b):
                continue
            m, ok = _fit_h_nb(a, b)
        else:
            m, ok = _fit_f_nb(a, b)
        if not ok:
            continue
        mask = _residuals_nb(m, src, dst, kind) <= thr2
        count = int(mask.sum())
        if count > best_count:
            best = mask
            best_count = count
            ws = (count / n) ** s
            if ws >= 1.0:
                needed = 1
            elif ws > 0.0:
                k = math.log(1.0 - confidence) / math.log(1.0 - ws)
                needed = min(iters, max(1, int(math.ceil(k))))
    return best, ran
