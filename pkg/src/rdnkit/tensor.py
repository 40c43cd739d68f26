"""Dense H x W x C float64 maps and the reverse-mode machinery behind them.

Tensors are plain ``numpy`` arrays of shape ``(height, width, channels)``.
Every forward op here is a pure function; the matching ``*_backward``
function is its vector-Jacobian product.  :class:`GradTape` strings them
together for one forward pass so :func:`backward` can replay it in reverse.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rdnkit import kernels
from rdnkit.errors import ContractError, GradCheckError


def as_tensor(x, name="tensor") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or min(a.shape[:2]) < 1:
        raise ContractError(f"{name} must be a non-empty H x W x C array, got shape {a.shape}")
    return a


@dataclass
class ConvLayer:
    """Square convolution with zero padding that preserves H x W."""

    kernel: np.ndarray  # (outC, inC, k, k)
    bias: np.ndarray  # (outC,)
    dilation: int = 1

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3] or self.kernel.shape[2] % 2 == 0:
            raise ContractError(f"kernel must be (outC, inC, k, k) with odd k, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ContractError(f"bias shape {self.bias.shape} does not match outC={self.kernel.shape[0]}")
        if self.dilation < 1:
            raise ContractError(f"dilation must be positive, got {self.dilation}")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def size(self) -> int:
        return self.kernel.shape[2]

    @property
    def padding(self) -> int:
        return (self.size - 1) // 2 * self.dilation

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.kernel.copy(), self.bias.copy(), self.dilation)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _conv_cols(x, layer):
    h, w, c = x.shape
    if c != layer.in_channels:
        raise ContractError(f"conv2d expects {layer.in_channels} input channels, got {c}")
    if layer.size == 1:
        return x.reshape(h * w, c)
    p = layer.padding
    xpad = np.pad(x, ((p, p), (p, p), (0, 0)))
    return kernels.im2col(xpad, h, w, layer.size, layer.dilation)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    x = as_tensor(x)
    h, w, _ = x.shape
    cols = _conv_cols(x, layer)
    out = cols @ layer.kernel.reshape(layer.out_channels, -1).T + layer.bias
    return out.reshape(h, w, layer.out_channels)


def conv2d_backward(g, x, layer, cols=None):
    """Returns (grad_input, grad_kernel, grad_bias)."""
    h, w, c = x.shape
    if cols is None:
        cols = _conv_cols(x, layer)
    g2 = g.reshape(h * w, layer.out_channels)
    kmat = layer.kernel.reshape(layer.out_channels, -1)
    gk = (g2.T @ cols).reshape(layer.kernel.shape)
    gb = g2.sum(axis=0)
    dcols = g2 @ kmat
    if layer.size == 1:
        gx = dcols.reshape(h, w, c)
    else:
        gx = kernels.col2im(dcols, h, w, c, layer.size, layer.dilation, layer.padding)
    return gx, gk, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g, x):
    # subgradient 0 at the kink
    return g * (x > 0.0)


def _pool_window(x, window):
    if window <= 0:
        raise ContractError(f"pooling window must be positive, got {window}")
    return min(int(window), x.shape[0]), min(int(window), x.shape[1])


def avg_pool_blocks(x: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping block means with stride = window.

    The window is clamped to the map size per axis, so a window at least as
    large as the map yields the global mean.
    """
    x = as_tensor(x)
    return kernels.block_pool(x, *_pool_window(x, window))


def avg_pool_blocks_backward(g, x_shape, window):
    h, w = x_shape[:2]
    return kernels.block_pool_backward(g, h, w, min(int(window), h), min(int(window), w))


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resize with edge clamping."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output size must be positive, got {out_h}x{out_w}")
    return kernels.upsample(x, out_h, out_w)


def bilinear_upsample_backward(g, x_shape):
    return kernels.upsample_backward(g, x_shape[0], x_shape[1])


def l2_normalize_channels(x: np.ndarray, epsilon: float = 1e-10) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, epsilon)


def l2_normalize_channels_backward(g, x, epsilon=1e-10):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    denom = np.maximum(norm, epsilon)
    y = x / denom
    radial = np.sum(y * g, axis=-1, keepdims=True)
    # below epsilon the map is linear: d(x/eps) = g/eps
    return np.where(norm > epsilon, (g - y * radial) / denom, g / denom)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:2] != b.shape[:2]:
        raise ContractError(f"concat_channels needs matching H x W, got {a.shape[:2]} and {b.shape[:2]}")
    return np.concatenate([a, b], axis=-1)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: int
    vjp: Callable  # g -> (input grads tuple, {param name: grad})


@dataclass
class GradTape:
    """Single-use record of one forward pass.

    Values are tracked by the identity of the arrays the tape hands out, so
    only arrays returned by :meth:`watch` or another tape method may be fed
    back in.  The tape holds references to all of them for its lifetime.
    """

    records: list = field(default_factory=list)
    _values: dict = field(default_factory=dict)
    input_id: int = -1
    output_id: int = -1
    consumed: bool = False

    def _slot(self, arr):
        key = id(arr)
        if key not in self._values:
            raise ContractError("array was not produced on this tape")
        return key

    def _emit(self, op, inputs, out, vjp):
        self._values[id(out)] = out
        self.records.append(_Record(op, tuple(self._slot(a) for a in inputs), id(out), vjp))
        self.output_id = id(out)
        return out

    def watch(self, x: np.ndarray) -> np.ndarray:
        x = np.array(as_tensor(x), dtype=np.float64)
        self._values[id(x)] = x
        self.input_id = id(x)
        self.output_id = id(x)
        return x

    def conv2d(self, x, layer: ConvLayer, name: str):
        h, w, _ = x.shape
        cols = _conv_cols(x, layer)
        out = (cols @ layer.kernel.reshape(layer.out_channels, -1).T + layer.bias).reshape(h, w, layer.out_channels)

        def vjp(g):
            gx, gk, gb = conv2d_backward(g, x, layer, cols)
            return (gx,), {f"{name}.kernel": gk, f"{name}.bias": gb}

        return self._emit("conv2d", (x,), out, vjp)

    def relu(self, x):
        out = relu(x)
        return self._emit("relu", (x,), out, lambda g: ((relu_backward(g, x),), {}))

    def avg_pool_blocks(self, x, window):
        out = avg_pool_blocks(x, window)
        shape = x.shape
        return self._emit("avg_pool_blocks", (x,), out,
                          lambda g: ((avg_pool_blocks_backward(g, shape, window),), {}))

    def bilinear_upsample(self, x, out_h, out_w):
        out = bilinear_upsample(x, out_h, out_w)
        shape = x.shape
        return self._emit("bilinear_upsample", (x,), out,
                          lambda g: ((bilinear_upsample_backward(g, shape),), {}))

    def concat_channels(self, a, b):
        out = concat_channels(a, b)
        ca = a.shape[2]
        return self._emit("concat_channels", (a, b), out, lambda g: ((g[..., :ca], g[..., ca:]), {}))

    def l2_normalize_channels(self, x, epsilon=1e-10):
        out = l2_normalize_channels(x, epsilon)
        return self._emit("l2_normalize_channels", (x,), out,
                          lambda g: ((l2_normalize_channels_backward(g, x, epsilon),), {}))


def backward(tape: GradTape, upstream: np.ndarray):
    """Reverse-mode sweep over ``tape``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` maps
    ``"<layer>.kernel"`` / ``"<layer>.bias"`` to arrays.
    """
    if tape.consumed:
        raise ContractError("tape already consumed by a backward pass")
    out = tape._values.get(tape.output_id)
    upstream = np.asarray(upstream, dtype=np.float64)
    if out is None or upstream.shape != out.shape:
        raise ContractError(f"upstream gradient shape {upstream.shape} does not match output "
                            f"{None if out is None else out.shape}")
    tape.consumed = True
    grads = {tape.output_id: upstream}
    params = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        in_grads, p_grads = rec.vjp(g)
        for key, gi in zip(rec.inputs, in_grads):
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
        for name, gp in p_grads.items():
            params[name] = params[name] + gp if name in params else gp
    x = tape._values.get(tape.input_id)
    gin = grads.get(tape.input_id)
    if gin is None and x is not None:
        gin = np.zeros_like(x)
    return params, gin


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class BlockReport:
    name: str
    max_rel_error: float
    checked: int
    excluded: int
    passed: bool


def _rel_err(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(forward_fn, params: dict, tolerance: float = 1e-4, step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> dict:
    """Compare analytic gradients with central differences.

    ``forward_fn(params)`` must return ``(value, grads)`` with ``grads``
    keyed like ``params``.  Entries are perturbed in place and restored.

    An entry sitting on a kink (relu at exactly 0, a hinge at its corner) is
    excluded rather than failed: it is recognised when the central estimate
    disagrees with the analytic value but one of the one-sided slopes
    matches it.  ``max_entries`` caps how many entries per block are probed
    (chosen with a seeded generator).
    """
    value, grads = forward_fn(params)
    if not np.isfinite(value):
        raise GradCheckError(f"forward value is not finite: {value}")
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        ga = np.asarray(grads.get(name, np.zeros_like(p))).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst, excluded = 0.0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp, _ = forward_fn(params)
            flat[i] = orig - step
            fm, _ = forward_fn(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite forward value while probing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            err = _rel_err(ga[i], num)
            if err > tolerance:
                right = (fp - value) / step
                left = (value - fm) / step
                if _rel_err(right, left) > tolerance and min(_rel_err(ga[i], right), _rel_err(ga[i], left)) <= 10 * tolerance:
                    excluded += 1
                    continue
            worst = max(worst, err)
        report[name] = BlockReport(name, worst, len(idx) - excluded, excluded, worst <= tolerance)
    return report
