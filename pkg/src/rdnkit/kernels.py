"""Hot inner loops.

Each kernel exists twice: a loop form compiled with numba (``_*_nb``) and a
vectorised numpy twin (``_*_np``).  The public wrapper picks one according
to :mod:`rdnkit._backend`.  Twins agree to rounding; the distance kernels
agree bit-for-bit because both accumulate squared differences in the same
sequential order.
"""

import numpy as np

from rdnkit._backend import njit, use_numba

# ---------------------------------------------------------------------------
# dilated convolution: patch gather / scatter
# ---------------------------------------------------------------------------


@njit
def _im2col_nb(xpad, h, w, k, dil):
    c = xpad.shape[2]
    kk = k * k
    cols = np.empty((h * w, c * kk))
    for y in range(h):
        for x in range(w):
            row = y * w + x
            for i in range(c):
                base = i * kk
                for dy in range(k):
                    for dx in range(k):
                        cols[row, base + dy * k + dx] = xpad[y + dy * dil, x + dx * dil, i]
    return cols


def _im2col_np(xpad, h, w, k, dil):
    c = xpad.shape[2]
    patches = [xpad[dy * dil:dy * dil + h, dx * dil:dx * dil + w, :]
               for dy in range(k) for dx in range(k)]
    return np.stack(patches, axis=-1).reshape(h * w, c * k * k)


def im2col(xpad: np.ndarray, h: int, w: int, k: int, dil: int) -> np.ndarray:
    """Gather dilated k x k patches of a zero-padded (h+2p, w+2p, c) map.

    Column index is ``channel * k*k + dy * k + dx`` so the result multiplies
    directly against a kernel reshaped to ``(outC, inC*k*k)``.
    """
    if use_numba():
        return _im2col_nb(np.ascontiguousarray(xpad), h, w, k, dil)
    return _im2col_np(xpad, h, w, k, dil)


@njit
def _col2im_nb(dcols, h, w, c, k, dil, pad):
    kk = k * k
    out = np.zeros((h + 2 * pad, w + 2 * pad, c))
    for y in range(h):
        for x in range(w):
            row = y * w + x
            for i in range(c):
                base = i * kk
                for dy in range(k):
                    for dx in range(k):
                        out[y + dy * dil, x + dx * dil, i] += dcols[row, base + dy * k + dx]
    return out[pad:pad + h, pad:pad + w, :].copy()


def _col2im_np(dcols, h, w, c, k, dil, pad):
    out = np.zeros((h + 2 * pad, w + 2 * pad, c))
    g = dcols.reshape(h, w, c, k * k)
    for dy in range(k):
        for dx in range(k):
            out[dy * dil:dy * dil + h, dx * dil:dx * dil + w, :] += g[..., dy * k + dx]
    return out[pad:pad + h, pad:pad + w, :].copy()


def col2im(dcols, h, w, c, k, dil, pad):
    """Adjoint of :func:`im2col`, cropped back to the unpadded (h, w, c) map."""
    if use_numba():
        return _col2im_nb(np.ascontiguousarray(dcols), h, w, c, k, dil, pad)
    return _col2im_np(dcols, h, w, c, k, dil, pad)


# ---------------------------------------------------------------------------
# block average pooling
# ---------------------------------------------------------------------------


@njit
def _block_pool_nb(x, wy, wx):
    h, w, c = x.shape
    ho = (h + wy - 1) // wy
    wo = (w + wx - 1) // wx
    out = np.zeros((ho, wo, c))
    for by in range(ho):
        y1 = min(h, (by + 1) * wy)
        for bx in range(wo):
            x1 = min(w, (bx + 1) * wx)
            n = (y1 - by * wy) * (x1 - bx * wx)
            for y in range(by * wy, y1):
                for xx in range(bx * wx, x1):
                    for i in range(c):
                        out[by, bx, i] += x[y, xx, i]
            for i in range(c):
                out[by, bx, i] /= n
    return out


def _block_counts(h, w, wy, wx):
    cy = np.minimum(wy, h - np.arange(0, h, wy))
    cx = np.minimum(wx, w - np.arange(0, w, wx))
    return np.outer(cy, cx).astype(np.float64)


def _block_pool_np(x, wy, wx):
    h, w, _ = x.shape
    s = np.add.reduceat(np.add.reduceat(x, np.arange(0, h, wy), axis=0), np.arange(0, w, wx), axis=1)
    return s / _block_counts(h, w, wy, wx)[:, :, None]


def block_pool(x: np.ndarray, wy: int, wx: int) -> np.ndarray:
    """Mean over non-overlapping wy x wx tiles; edge tiles average their actual coverage."""
    if use_numba():
        return _block_pool_nb(np.ascontiguousarray(x), wy, wx)
    return _block_pool_np(x, wy, wx)


@njit
def _block_pool_backward_nb(g, h, w, wy, wx):
    c = g.shape[2]
    out = np.empty((h, w, c))
    for y in range(h):
        by = y // wy
        ny = min(h, (by + 1) * wy) - by * wy
        for xx in range(w):
            bx = xx // wx
            nx = min(w, (bx + 1) * wx) - bx * wx
            inv = 1.0 / (ny * nx)
            for i in range(c):
                out[y, xx, i] = g[by, bx, i] * inv
    return out


def _block_pool_backward_np(g, h, w, wy, wx):
    scaled = g / _block_counts(h, w, wy, wx)[:, :, None]
    return np.repeat(np.repeat(scaled, wy, axis=0)[:h], wx, axis=1)[:, :w].copy()


def block_pool_backward(g, h, w, wy, wx):
    if use_numba():
        return _block_pool_backward_nb(np.ascontiguousarray(g), h, w, wy, wx)
    return _block_pool_backward_np(g, h, w, wy, wx)


# ---------------------------------------------------------------------------
# center-aligned bilinear resampling
# ---------------------------------------------------------------------------


def interp_taps(n_in: int, n_out: int):
    """Lower tap, upper tap and blend weight for each output coordinate."""
    u = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    u = np.clip(u, 0.0, n_in - 1)
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, u - i0


@njit
def _upsample_nb(x, y0, y1, fy, x0, x1, fx):
    c = x.shape[2]
    ho = y0.shape[0]
    wo = x0.shape[0]
    out = np.empty((ho, wo, c))
    for y in range(ho):
        a = fy[y]
        for xx in range(wo):
            b = fx[xx]
            w00 = (1.0 - a) * (1.0 - b)
            w01 = (1.0 - a) * b
            w10 = a * (1.0 - b)
            w11 = a * b
            for i in range(c):
                out[y, xx, i] = (w00 * x[y0[y], x0[xx], i] + w01 * x[y0[y], x1[xx], i]
                                 + w10 * x[y1[y], x0[xx], i] + w11 * x[y1[y], x1[xx], i])
    return out


def _upsample_np(x, y0, y1, fy, x0, x1, fx):
    a = fy[:, None, None]
    b = fx[None, :, None]
    top = x[y0]
    bot = x[y1]
    return ((1.0 - a) * (1.0 - b) * top[:, x0] + (1.0 - a) * b * top[:, x1]
            + a * (1.0 - b) * bot[:, x0] + a * b * bot[:, x1])


def upsample(x, out_h, out_w):
    h, w, _ = x.shape
    y0, y1, fy = interp_taps(h, out_h)
    x0, x1, fx = interp_taps(w, out_w)
    if use_numba():
        return _upsample_nb(np.ascontiguousarray(x), y0, y1, fy, x0, x1, fx)
    return _upsample_np(x, y0, y1, fy, x0, x1, fx)


@njit
def _upsample_backward_nb(g, h, w, y0, y1, fy, x0, x1, fx):
    ho, wo, c = g.shape
    out = np.zeros((h, w, c))
    for y in range(ho):
        a = fy[y]
        for xx in range(wo):
            b = fx[xx]
            w00 = (1.0 - a) * (1.0 - b)
            w01 = (1.0 - a) * b
            w10 = a * (1.0 - b)
            w11 = a * b
            for i in range(c):
                v = g[y, xx, i]
                out[y0[y], x0[xx], i] += w00 * v
                out[y0[y], x1[xx], i] += w01 * v
                out[y1[y], x0[xx], i] += w10 * v
                out[y1[y], x1[xx], i] += w11 * v
    return out


def _interp_matrix(i0, i1, f, n_in):
    m = np.zeros((i0.shape[0], n_in))
    rows = np.arange(i0.shape[0])
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def _upsample_backward_np(g, h, w, y0, y1, fy, x0, x1, fx):
    ry = _interp_matrix(y0, y1, fy, h)
    rx = _interp_matrix(x0, x1, fx, w)
    return np.einsum("yh,yxc,xw->hwc", ry, g, rx)


def upsample_backward(g, h, w):
    """Adjoint of :func:`upsample` from an (out_h, out_w, c) gradient back to (h, w, c)."""
    out_h, out_w, _ = g.shape
    y0, y1, fy = interp_taps(h, out_h)
    x0, x1, fx = interp_taps(w, out_w)
    if use_numba():
        return _upsample_backward_nb(np.ascontiguousarray(g), h, w, y0, y1, fy, x0, x1, fx)
    return _upsample_backward_np(g, h, w, y0, y1, fy, x0, x1, fx)


# ---------------------------------------------------------------------------
# descriptor distances
# ---------------------------------------------------------------------------


@njit
def _sq_dists_nb(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            out[i, j] = s
    return out


def _sq_dists_np(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        t = a[:, k][:, None] - b[:, k][None, :]
        out += t * t
    return out


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, summed component by component in index order."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if use_numba():
        return _sq_dists_nb(a, b)
    return _sq_dists_np(a, b)


@njit
def _nearest_nb(a, b):
    # row-wise argmin of the distance matrix without materialising it
    n, d = a.shape
    m = b.shape[0]
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n)
    for i in range(n):
        bi = -1
        bd = np.inf
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            if s < bd:
                bd = s
                bi = j
        idx[i] = bi
        best[i] = bd
    return idx, best


def nearest(a: np.ndarray, b: np.ndarray):
    """Index and squared distance of each row's nearest row in ``b``; ties go to the lowest index."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if use_numba():
        return _nearest_nb(a, b)
    d = _sq_dists_np(a, b)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(a.shape[0]), idx]


# ---------------------------------------------------------------------------
# inverse warping
# ---------------------------------------------------------------------------


@njit
def _warp_nb(img, hinv, out_h, out_w):
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    mask = np.zeros((out_h, out_w), dtype=np.bool_)
    for y in range(out_h):
        for x in range(out_w):
            zx = hinv[0, 0] * x + hinv[0, 1] * y + hinv[0, 2]
            zy = hinv[1, 0] * x + hinv[1, 1] * y + hinv[1, 2]
            zw = hinv[2, 0] * x + hinv[2, 1] * y + hinv[2, 2]
            if zw == 0.0:
                continue
            u = zx / zw
            v = zy / zw
            if not (u >= 0.0 and u <= w - 1 and v >= 0.0 and v <= h - 1):
                continue
            u0 = int(np.floor(u))
            v0 = int(np.floor(v))
            u1 = min(u0 + 1, w - 1)
            v1 = min(v0 + 1, h - 1)
            a = v - v0
            b = u - u0
            mask[y, x] = True
            for i in range(c):
                out[y, x, i] = ((1.0 - a) * (1.0 - b) * img[v0, u0, i] + (1.0 - a) * b * img[v0, u1, i]
                                + a * (1.0 - b) * img[v1, u0, i] + a * b * img[v1, u1, i])
    return out, mask


def _warp_np(img, hinv, out_h, out_w):
    h, w, c = img.shape
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    zx = hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]
    zy = hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]
    zw = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = zx / zw
        v = zy / zw
    mask = (zw != 0.0) & (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    u = np.where(mask, u, 0.0)
    v = np.where(mask, v, 0.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = (v - v0)[..., None]
    b = (u - u0)[..., None]
    out = ((1.0 - a) * (1.0 - b) * img[v0, u0] + (1.0 - a) * b * img[v0, u1]
           + a * (1.0 - b) * img[v1, u0] + a * b * img[v1, u1])
    out[~mask] = 0.0
    return out, mask


def warp(img: np.ndarray, hinv: np.ndarray, out_h: int, out_w: int):
    """Sample ``img`` at ``hinv`` applied to every output pixel; returns (image, valid mask)."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    hinv = np.ascontiguousarray(hinv, dtype=np.float64)
    if use_numba():
        return _warp_nb(img, hinv, out_h, out_w)
    return _warp_np(img, hinv, out_h, out_w)
