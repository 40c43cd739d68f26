"""The region-based descriptor network.

A dilated, full-resolution convolutional backbone produces low-level
per-pixel features; a four-branch block-average pyramid adds context; the
two halves are concatenated and unit-normalised per pixel.
"""

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rdnkit import tensor as T
from rdnkit.errors import (
    ChecksumError,
    ContractError,
    DecodeError,
    MagicMismatchError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from rdnkit.tensor import ConvLayer, GradTape


@dataclass(frozen=True)
class RdnConfig:
    fen_channels: tuple = (32, 32, 64, 64, 128, 128)
    fen_dilations: tuple = (1, 1, 2, 2, 4, 4)
    spp_windows: tuple = (64, 32, 16, 8)
    branch_channels: int | None = None
    epsilon: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fen_channels", tuple(int(c) for c in self.fen_channels))
        object.__setattr__(self, "fen_dilations", tuple(int(d) for d in self.fen_dilations))
        object.__setattr__(self, "spp_windows", tuple(int(w) for w in self.spp_windows))
        if self.branch_channels is None:
            object.__setattr__(self, "branch_channels", self.fen_channels[-1] // 4)
        self.validate()

    def validate(self):
        if len(self.fen_channels) != 6 or len(self.fen_dilations) != 6:
            raise ContractError("fen_channels and fen_dilations need six entries each")
        if any(c < 1 for c in self.fen_channels) or any(d < 1 for d in self.fen_dilations):
            raise ContractError("channel counts and dilations must be positive")
        if self.fen_channels[-1] % 4:
            raise ContractError(f"last FEN width {self.fen_channels[-1]} is not divisible by 4")
        if len(self.spp_windows) != 4 or min(self.spp_windows) < 1:
            raise ContractError("spp_windows needs four sizes >= 1")
        if any(a <= b for a, b in zip(self.spp_windows, self.spp_windows[1:])):
            raise ContractError(f"spp_windows must be strictly decreasing, got {self.spp_windows}")
        if 4 * self.branch_channels != self.fen_channels[-1]:
            raise ContractError("four pyramid branches must reassemble to the FEN width")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")

    @property
    def low_dim(self) -> int:
        return self.fen_channels[-1]

    @property
    def descriptor_dim(self) -> int:
        return 2 * self.fen_channels[-1]

    @property
    def receptive_radius(self) -> int:
        return sum(self.fen_dilations)

    @classmethod
    def full(cls, **kw) -> "RdnConfig":
        return cls(**kw)

    @classmethod
    def quarter(cls, **kw) -> "RdnConfig":
        """Narrow profile for tests and desk-scale training (64-d descriptors)."""
        kw.setdefault("fen_channels", (8, 8, 16, 16, 32, 32))
        return cls(**kw)

    @classmethod
    def profile(cls, name: str, **kw) -> "RdnConfig":
        if name == "full":
            return cls.full(**kw)
        if name == "quarter":
            return cls.quarter(**kw)
        raise ContractError(f"unknown profile {name!r} (expected full or quarter)")


@dataclass
class RdnWeights:
    fen: list = field(default_factory=list)
    reducers: list = field(default_factory=list)

    def named_params(self) -> dict:
        """Flat name -> array view used by the optimiser and gradient checks."""
        out = {}
        for prefix, layers in (("fen", self.fen), ("spp", self.reducers)):
            for i, layer in enumerate(layers):
                out[f"{prefix}.{i}.kernel"] = layer.kernel
                out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def layers(self) -> list:
        return list(self.fen) + list(self.reducers)

    def copy(self) -> "RdnWeights":
        return RdnWeights([l.copy() for l in self.fen], [l.copy() for l in self.reducers])

    def check(self, config: RdnConfig):
        expected = _layer_shapes(config)
        got = [(l.kernel.shape, l.dilation) for l in self.layers()]
        if got != expected:
            raise ContractError(f"weights do not match config: {got} vs {expected}")
        for layer in self.layers():
            if not (np.all(np.isfinite(layer.kernel)) and np.all(np.isfinite(layer.bias))):
                raise ContractError("weights contain non-finite values")


def _layer_shapes(config: RdnConfig):
    shapes = []
    cin = 3
    for cout, dil in zip(config.fen_channels, config.fen_dilations):
        shapes.append(((cout, cin, 3, 3), dil))
        cin = cout
    shapes += [((config.branch_channels, config.low_dim, 1, 1), 1)] * 4
    return shapes


def init_weights(config: RdnConfig) -> RdnWeights:
    """He-normal kernels (std sqrt(2 / fan_in)), zero biases, seeded."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    layers = []
    for shape, dil in _layer_shapes(config):
        fan_in = shape[1] * shape[2] * shape[3]
        kernel = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(kernel, np.zeros(shape[0]), dil))
    return RdnWeights(layers[:6], layers[6:])


class _Eager:
    """Tape-shaped facade over the pure ops, for inference."""

    conv2d = staticmethod(lambda x, layer, name: T.conv2d(x, layer))
    relu = staticmethod(T.relu)
    avg_pool_blocks = staticmethod(T.avg_pool_blocks)
    bilinear_upsample = staticmethod(T.bilinear_upsample)
    concat_channels = staticmethod(T.concat_channels)
    l2_normalize_channels = staticmethod(T.l2_normalize_channels)


def _ops(tape):
    return _Eager if tape is None else tape


def fen_forward(image, weights: RdnWeights, config: RdnConfig, tape: GradTape | None = None):
    """Six dilated 3x3 convs, ReLU after the first five; H x W preserved."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"FEN expects an H x W x 3 image, got shape {image.shape}")
    ops = _ops(tape)
    x = image
    for i, layer in enumerate(weights.fen):
        x = ops.conv2d(x, layer, f"fen.{i}")
        if i < len(weights.fen) - 1:
            x = ops.relu(x)
    return x


def hffm_forward(d_low, weights: RdnWeights, config: RdnConfig, tape: GradTape | None = None):
    """Pool -> 1x1 conv -> ReLU -> upsample for each pyramid window, then concatenate."""
    if d_low.shape[2] != config.low_dim:
        raise ContractError(f"HFFM expects {config.low_dim} channels, got {d_low.shape[2]}")
    ops = _ops(tape)
    h, w = d_low.shape[:2]
    out = None
    for j, (window, layer) in enumerate(zip(config.spp_windows, weights.reducers)):
        b = ops.avg_pool_blocks(d_low, window)
        b = ops.relu(ops.conv2d(b, layer, f"spp.{j}"))
        b = ops.bilinear_upsample(b, h, w)
        out = b if out is None else ops.concat_channels(out, b)
    return out


def describe(image, weights: RdnWeights, config: RdnConfig, tape: GradTape | None = None,
             low_only: bool = False) -> np.ndarray:
    """Dense unit-norm descriptor field of shape H x W x (2 * FEN width).

    With ``low_only`` the pyramid half is dropped and the FEN features are
    normalised on their own (the ablation used for evaluation).
    """
    if tape is not None:
        image = tape.watch(image)
    else:
        image = T.as_tensor(image, "image")
    ops = _ops(tape)
    d_low = fen_forward(image, weights, config, tape)
    if low_only:
        return ops.l2_normalize_channels(d_low, config.epsilon)
    d_high = hffm_forward(d_low, weights, config, tape)
    return ops.l2_normalize_channels(ops.concat_channels(d_low, d_high), config.epsilon)


def sample_descriptors(field: np.ndarray, keypoints) -> np.ndarray:
    """Rows of the field at integer (x, y) keypoints, in order."""
    kp = np.asarray(keypoints)
    if kp.size == 0:
        return np.empty((0, field.shape[2]))
    kp = kp.reshape(-1, 2)
    if not np.all(kp == np.round(kp)):
        raise ContractError("keypoints must be integer pixel coordinates")
    kp = kp.astype(np.int64)
    h, w = field.shape[:2]
    bad = np.flatnonzero((kp[:, 0] < 0) | (kp[:, 0] >= w) | (kp[:, 1] < 0) | (kp[:, 1] >= h))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"keypoint {i} at (x={kp[i, 0]}, y={kp[i, 1]}) outside {w}x{h} field")
    return field[kp[:, 1], kp[:, 0]]


# ---------------------------------------------------------------------------
# RDNW weight files
# ---------------------------------------------------------------------------

MAGIC = b"RDNW"
VERSION = 1


def encode_weights(weights: RdnWeights) -> bytes:
    layers = weights.layers()
    parts = [MAGIC, struct.pack("<II", VERSION, len(layers))]
    for layer in layers:
        parts.append(struct.pack("<5I", *layer.kernel.shape, layer.dilation))
        parts.append(layer.kernel.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_weights(data: bytes, config: RdnConfig | None = None) -> RdnWeights:
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise TruncatedFileError("file ends inside the header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    pos = 12
    layers = []
    for n in range(count):
        if pos + 20 > len(data) - 4:
            raise TruncatedFileError(f"file ends inside layer {n} header")
        oc, ic, kh, kw, dil = struct.unpack_from("<5I", data, pos)
        pos += 20
        nk = oc * ic * kh * kw
        if pos + 4 * (nk + oc) > len(data) - 4:
            raise TruncatedFileError(f"file ends inside layer {n} payload")
        kernel = np.frombuffer(data, "<f4", nk, pos).reshape(oc, ic, kh, kw).astype(np.float64)
        pos += 4 * nk
        bias = np.frombuffer(data, "<f4", oc, pos).astype(np.float64)
        pos += 4 * oc
        try:
            layers.append(ConvLayer(kernel, bias, dil))
        except ContractError as exc:
            raise ShapeMismatchError(f"layer {n}: {exc}") from None
    if pos + 4 != len(data):
        raise TruncatedFileError(f"expected {pos + 4} bytes, found {len(data)}")
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[:pos]):
        raise ChecksumError("CRC32 mismatch")
    if count != 10:
        raise ShapeMismatchError(f"expected 10 layers, found {count}")
    weights = RdnWeights(layers[:6], layers[6:])
    if config is None:
        config = config_from_weights(weights)
    try:
        weights.check(config)
    except ContractError as exc:
        raise ShapeMismatchError(str(exc)) from None
    return weights


def config_from_weights(weights: RdnWeights, **kw) -> RdnConfig:
    """Recover channel widths and dilations from layer shapes (pyramid windows from ``kw``)."""
    try:
        return RdnConfig(fen_channels=tuple(l.out_channels for l in weights.fen),
                         fen_dilations=tuple(l.dilation for l in weights.fen),
                         branch_channels=weights.reducers[0].out_channels, **kw)
    except (ContractError, IndexError) as exc:
        raise ShapeMismatchError(f"weights do not describe a valid network: {exc}") from None


def save_weights(weights: RdnWeights, path) -> None:
    Path(path).write_bytes(encode_weights(weights))


def load_weights(path, config: RdnConfig | None = None) -> RdnWeights:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc.strerror}") from None
    return decode_weights(data, config)


def quantize(weights: RdnWeights) -> RdnWeights:
    """Round every parameter through float32, as a save/load cycle does."""
    return RdnWeights(
        [ConvLayer(l.kernel.astype(np.float32).astype(np.float64), l.bias.astype(np.float32).astype(np.float64), l.dilation)
         for l in weights.fen],
        [ConvLayer(l.kernel.astype(np.float32).astype(np.float64), l.bias.astype(np.float32).astype(np.float64), l.dilation)
         for l in weights.reducers],
    )
