"""Triplet-margin training with hardest-negative mining and Adam."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from rdnkit import kernels
from rdnkit.errors import ContractError, DegeneratePoolError, TrainingDivergenceError
from rdnkit.matching import uniform_grid
from rdnkit.model import RdnConfig, RdnWeights, describe, init_weights
from rdnkit.tensor import GradTape, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    safe_radius: int = 4  # Chebyshev pixels around the true match kept out of the negatives
    pool_stride: int = 4
    epochs: int = 50
    lr0: float = 1e-3
    lr_halving_period: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ContractError("margin must be positive")
        if self.safe_radius < 0 or self.pool_stride < 1:
            raise ContractError("safe_radius must be >= 0 and pool_stride >= 1")
        if not self.lr0 > 0 or self.lr_halving_period < 1 or self.epochs < 0:
            raise ContractError("lr0 > 0, lr_halving_period >= 1 and epochs >= 0 required")


def triplet_term(p: float, n: float, margin: float = 1.0) -> float:
    """max(0, M + p^2 - n^2) for positive distance p and negative distance n."""
    return max(0.0, margin + p * p - n * n)


def lr_schedule(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    return config.lr0 / 2 ** (epoch // config.lr_halving_period)


# ---------------------------------------------------------------------------
# negative mining
# ---------------------------------------------------------------------------


@dataclass
class Negatives:
    sq_distance: np.ndarray  # (N,) squared distance to the hardest negative
    side: np.ndarray  # 2: negative taken from image 2's pool, 1: from image 1's
    index: np.ndarray  # index into that pool

    @property
    def distance(self) -> np.ndarray:
        return np.sqrt(self.sq_distance)


def _chebyshev(points, centres):
    return np.max(np.abs(points[None, :, :] - centres[:, None, :]), axis=2)


def mine_negatives(anchor1, anchor2, p1, p2, pool1_desc, pool2_desc, pool1, pool2, safe_radius) -> Negatives:
    """Hardest negative per correspondence, searched in both directions.

    ``anchor1[i]`` (image 1 at ``p1[i]``) is compared with image 2's pool
    outside the safe radius around ``p2[i]``; ``anchor2[i]`` with image 1's
    pool outside the radius around ``p1[i]``.  Ties prefer image 2's pool,
    then the lowest pool index.
    """
    d12 = kernels.sq_dists(anchor1, pool2_desc)
    d12[_chebyshev(pool2, p2) <= safe_radius] = np.inf
    d21 = kernels.sq_dists(anchor2, pool1_desc)
    d21[_chebyshev(pool1, p1) <= safe_radius] = np.inf
    j2 = np.argmin(d12, axis=1)
    j1 = np.argmin(d21, axis=1)
    rows = np.arange(d12.shape[0])
    n2, n1 = d12[rows, j2], d21[rows, j1]
    take2 = n2 <= n1
    sq = np.where(take2, n2, n1)
    if np.isnan(sq).any() or not (np.isfinite(anchor1).all() and np.isfinite(anchor2).all()):
        raise TrainingDivergenceError("non-finite descriptors while mining negatives")
    if not np.all(np.isfinite(sq)):
        bad = int(np.flatnonzero(~np.isfinite(sq))[0])
        raise DegeneratePoolError(f"correspondence {bad}: every pool candidate lies within the safe radius")
    return Negatives(sq, np.where(take2, 2, 1), np.where(take2, j2, j1))


def hardest_negative(corr, field1, field2, pool1, pool2, safe_radius: int = 4) -> float:
    """Distance from correspondence ``(x1, y1, x2, y2)`` to its hardest negative."""
    c = np.asarray(corr, dtype=np.int64).reshape(1, 4)
    pool1 = np.asarray(pool1, dtype=np.int64).reshape(-1, 2)
    pool2 = np.asarray(pool2, dtype=np.int64).reshape(-1, 2)
    neg = mine_negatives(field1[c[:, 1], c[:, 0]], field2[c[:, 3], c[:, 2]], c[:, :2], c[:, 2:],
                         field1[pool1[:, 1], pool1[:, 0]], field2[pool2[:, 1], pool2[:, 0]],
                         pool1, pool2, safe_radius)
    return float(neg.distance[0])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class PairLoss:
    loss: float
    grads: dict
    n_correspondences: int
    n_active: int
    positive: np.ndarray = field(repr=False)
    negative: np.ndarray = field(repr=False)


def pair_loss(image1, image2, correspondences, weights: RdnWeights, config: RdnConfig,
              tconfig: TrainConfig = TrainConfig(), with_grads: bool = True) -> PairLoss:
    """Sum over correspondences of the triplet term, with parameter gradients.

    The hardest-negative selection is held fixed while differentiating.
    """
    corr = np.rint(np.asarray(correspondences, dtype=np.float64)).astype(np.int64).reshape(-1, 4)
    if corr.shape[0] < 1:
        raise ContractError("pair_loss needs at least one correspondence")
    t1 = GradTape() if with_grads else None
    t2 = GradTape() if with_grads else None
    f1 = describe(image1, weights, config, tape=t1)
    f2 = describe(image2, weights, config, tape=t2)
    h1, w1 = f1.shape[:2]
    h2, w2 = f2.shape[:2]
    pool1 = uniform_grid(h1, w1, tconfig.pool_stride, 0)
    pool2 = uniform_grid(h2, w2, tconfig.pool_stride, 0)
    p1, p2 = corr[:, :2], corr[:, 2:]
    a1 = f1[p1[:, 1], p1[:, 0]]
    a2 = f2[p2[:, 1], p2[:, 0]]
    q1 = f1[pool1[:, 1], pool1[:, 0]]
    q2 = f2[pool2[:, 1], pool2[:, 0]]
    neg = mine_negatives(a1, a2, p1, p2, q1, q2, pool1, pool2, tconfig.safe_radius)
    diff = a1 - a2
    pos_sq = np.sum(diff * diff, axis=1)
    terms = tconfig.margin + pos_sq - neg.sq_distance
    active = terms > 0
    loss = float(np.sum(terms[active]))
    grads = {}
    if with_grads:
        g1 = np.zeros_like(f1)
        g2 = np.zeros_like(f2)
        for i in np.flatnonzero(active):
            g1[p1[i, 1], p1[i, 0]] += 2 * diff[i]
            g2[p2[i, 1], p2[i, 0]] -= 2 * diff[i]
            j = neg.index[i]
            if neg.side[i] == 2:
                dn = a1[i] - q2[j]
                g1[p1[i, 1], p1[i, 0]] -= 2 * dn
                g2[pool2[j, 1], pool2[j, 0]] += 2 * dn
            else:
                dn = a2[i] - q1[j]
                g2[p2[i, 1], p2[i, 0]] -= 2 * dn
                g1[pool1[j, 1], pool1[j, 0]] += 2 * dn
        grads, _ = backward(t1, g1)
        grads2, _ = backward(t2, g2)
        for k, v in grads2.items():
            grads[k] = grads[k] + v
    return PairLoss(loss, grads, corr.shape[0], int(active.sum()), np.sqrt(pos_sq), neg.distance)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update of ``params`` in place; returns ``(params, state)``."""
    if not lr > 0:
        raise ContractError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params or np.shape(g) != params[name].shape:
            raise ContractError(f"gradient block {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    lr: float
    mean_correspondences: float


def _unpack(item):
    if hasattr(item, "correspondences"):
        return item.image1, item.image2, item.correspondences
    return item


def train(dataset, config: RdnConfig, tconfig: TrainConfig = TrainConfig(),
          weights: RdnWeights | None = None, callback=None):
    """One pair per Adam step, seeded shuffle per epoch.

    Returns ``(weights, curve)`` with one :class:`EpochStats` per epoch.
    """
    items = [_unpack(d) for d in dataset]
    if not items:
        raise ContractError("training set is empty")
    weights = init_weights(config) if weights is None else weights.copy()
    params = weights.named_params()
    state = AdamState()
    rng = np.random.default_rng(tconfig.seed)
    curve = []
    for epoch in range(tconfig.epochs):
        lr = lr_schedule(epoch, tconfig)
        order = rng.permutation(len(items))
        total, ncorr = 0.0, 0
        for k in order:
            i1, i2, corr = items[k]
            res = pair_loss(i1, i2, corr, weights, config, tconfig)
            if not math.isfinite(res.loss):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}, pair {k}")
            adam_step(params, res.grads, state, lr, tconfig.beta1, tconfig.beta2, tconfig.adam_eps)
            total += res.loss
            ncorr += res.n_correspondences
        stats = EpochStats(epoch, total / len(items), lr, ncorr / len(items))
        curve.append(stats)
        log.info("epoch %d loss %.6f lr %.3g", epoch, stats.mean_loss, lr)
        if callback is not None:
            callback(stats, weights)
    return weights, curve


def format_curve(curve) -> str:
    return "".join(f"{s.epoch}\t{s.mean_loss:.6f}\t{s.lr:.6g}\n" for s in curve)
