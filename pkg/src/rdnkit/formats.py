"""On-disk formats: PGM/PPM images, sparse descriptor files, matches, models, manifests."""

import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rdnkit.errors import (ChecksumError, ContractError, DecodeError, MagicMismatchError,
                           TruncatedFileError, VersionMismatchError)
from rdnkit.geometry import FUNDAMENTAL, HOMOGRAPHY, PlanarModel

# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_image(data: bytes, name: str = "<bytes>") -> np.ndarray:
    """Binary PGM/PPM bytes to an H×W×3 float64 tensor in [0, 1]."""
    m = _HEADER.match(data)
    if m is None:
        raise MagicMismatchError(f"{name}: not a binary PGM (P5) or PPM (P6) file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DecodeError(f"{name}: maxval {maxval} unsupported, expected 255")
    if w < 1 or h < 1:
        raise DecodeError(f"{name}: empty image {w}x{h}")
    ch = 3 if kind == b"P6" else 1
    body = data[m.end():]
    need = w * h * ch
    if len(body) < need:
        raise TruncatedFileError(f"{name}: expected {need} pixel bytes, found {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8, count=need).reshape(h, w, ch).astype(np.float64) / 255.0
    return np.repeat(px, 3, axis=2) if ch == 1 else px


def encode_image(image: np.ndarray) -> bytes:
    """Quantise to 8 bits; grey (2-D or equal channels) is written as P5, colour as P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3 and np.array_equal(img[..., 0], img[..., 1]) \
            and np.array_equal(img[..., 0], img[..., 2]):
        img = img[..., 0]
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ContractError(f"cannot encode image of shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    kind = "P5" if q.ndim == 2 else "P6"
    return f"{kind}\n{q.shape[1]} {q.shape[0]}\n255\n".encode() + q.tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    return decode_image(path.read_bytes(), str(path))


def write_image(path, image) -> None:
    Path(path).write_bytes(encode_image(image))


def match_overlay(image_a, image_b, pts_a, pts_b, colour=(1.0, 0.2, 0.2)) -> np.ndarray:
    """Side-by-side canvas with one straight segment per match; for inspection only."""
    ha, wa = image_a.shape[:2]
    hb, wb = image_b.shape[:2]
    canvas = np.zeros((max(ha, hb), wa + wb, 3))
    canvas[:ha, :wa] = image_a
    canvas[:hb, wa:] = image_b
    for (x0, y0), (x1, y1) in zip(np.asarray(pts_a, float), np.asarray(pts_b, float)):
        x1 += wa
        n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
        t = np.linspace(0.0, 1.0, n)
        xs = np.rint(x0 + t * (x1 - x0)).astype(int)
        ys = np.rint(y0 + t * (y1 - y0)).astype(int)
        ok = (xs >= 0) & (xs < canvas.shape[1]) & (ys >= 0) & (ys < canvas.shape[0])
        canvas[ys[ok], xs[ok]] = colour
    return canvas


# ---------------------------------------------------------------------------
# sparse descriptors
# ---------------------------------------------------------------------------

DESC_MAGIC = b"RDND"
DESC_VERSION = 1


@dataclass
class SparseDescriptors:
    keypoints: np.ndarray  # (N, 2) float x, y
    descriptors: np.ndarray  # (N, D)

    def __len__(self):
        return self.keypoints.shape[0]


def encode_descriptors(keypoints, descriptors) -> bytes:
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != kp.shape[0]:
        raise ContractError(f"{kp.shape[0]} keypoints but descriptor array of shape {d.shape}")
    rec = np.concatenate([kp, d], axis=1).astype("<f4")
    body = DESC_MAGIC + struct.pack("<III", DESC_VERSION, d.shape[0], d.shape[1]) + rec.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_descriptors(data: bytes, name: str = "<bytes>") -> SparseDescriptors:
    if data[:4] != DESC_MAGIC:
        raise MagicMismatchError(f"{name}: bad magic {data[:4]!r}, expected {DESC_MAGIC!r}")
    if len(data) < 20:
        raise TruncatedFileError(f"{name}: header truncated")
    version, n, dim = struct.unpack_from("<III", data, 4)
    if version != DESC_VERSION:
        raise VersionMismatchError(f"{name}: version {version}, expected {DESC_VERSION}")
    size = 16 + 4 * n * (dim + 2)
    if len(data) < size + 4:
        raise TruncatedFileError(f"{name}: expected {size + 4} bytes, found {len(data)}")
    if len(data) > size + 4:
        raise DecodeError(f"{name}: {len(data) - size - 4} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, size)
    if crc != zlib.crc32(data[:size]):
        raise ChecksumError(f"{name}: CRC32 mismatch")
    rec = np.frombuffer(data, dtype="<f4", count=n * (dim + 2), offset=16).reshape(n, dim + 2)
    rec = rec.astype(np.float64)
    return SparseDescriptors(rec[:, :2].copy(), rec[:, 2:].copy())


def write_descriptors(path, keypoints, descriptors) -> None:
    Path(path).write_bytes(encode_descriptors(keypoints, descriptors))


def read_descriptors(path) -> SparseDescriptors:
    path = Path(path)
    return decode_descriptors(path.read_bytes(), str(path))


# ---------------------------------------------------------------------------
# matches, models, correspondences, manifests
# ---------------------------------------------------------------------------


def format_matches(matches, kps_a, kps_b) -> str:
    lines = []
    for m in matches:
        xa, ya = kps_a[m.idx_a]
        xb, yb = kps_b[m.idx_b]
        lines.append(f"{m.idx_a}\t{m.idx_b}\t{xa:.6f}\t{ya:.6f}\t{xb:.6f}\t{yb:.6f}\t{m.distance:.6f}\n")
    return "".join(lines)


def parse_matches(text: str) -> list:
    """Rows of (idxA, idxB, x1, y1, x2, y2, distance)."""
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 7:
            raise DecodeError(f"match line {n}: expected 7 fields, found {len(f)}")
        rows.append((int(f[0]), int(f[1]), *map(float, f[2:])))
    return rows


def format_model(model: PlanarModel) -> str:
    rows = "".join("\t".join(f"{v:.12g}" for v in r) + "\n" for r in model.m)
    return f"{model.kind}\n{rows}"


def parse_model(text: str, name: str = "<text>") -> PlanarModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 4 or lines[0].strip() not in (HOMOGRAPHY, FUNDAMENTAL):
        raise DecodeError(f"{name}: expected a kind line and three matrix rows")
    try:
        m = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    except ValueError as exc:
        raise DecodeError(f"{name}: {exc}") from None
    if m.shape != (3, 3):
        raise DecodeError(f"{name}: matrix must be 3x3, got {m.shape}")
    return PlanarModel(m, lines[0].strip())


def format_correspondences(corr) -> str:
    c = np.asarray(corr).reshape(-1, 4)
    if np.issubdtype(c.dtype, np.integer):
        return "".join("\t".join(str(int(v)) for v in r) + "\n" for r in c)
    return "".join("\t".join(f"{v:.6f}" for v in r) + "\n" for r in c)


def parse_correspondences(text: str, name: str = "<text>") -> np.ndarray:
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 4:
            raise DecodeError(f"{name} line {n}: expected 4 fields, found {len(f)}")
        rows.append([float(v) for v in f])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class ManifestEntry:
    image1: Path
    image2: Path
    model: Path
    correspondences: Path


def read_manifest(path) -> list:
    """Entries with paths resolved relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 4:
            raise DecodeError(f"{path} line {n}: expected 4 tab-separated paths, found {len(f)}")
        out.append(ManifestEntry(*(base / p for p in f)))
    return out


def load_entry(entry: ManifestEntry):
    """``(image1, image2, model, correspondences)`` for one manifest line."""
    return (read_image(entry.image1), read_image(entry.image2),
            parse_model(entry.model.read_text(), str(entry.model)),
            parse_correspondences(entry.correspondences.read_text(), str(entry.correspondences)))
