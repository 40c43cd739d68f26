"""Matching accuracy over a corpus of pairs, split by local texture."""

from dataclasses import dataclass, field

import numpy as np

from rdnkit.matching import match_errors, mutual_nn_match, uniform_grid
from rdnkit.model import describe, sample_descriptors
from rdnkit.synth import PAIR_MARGIN, gradient_energy

FLAT_ENERGY = 0.01  # mean gradient magnitude over the 9x9 neighbourhood, intensity units


@dataclass
class PairEval:
    """Per-pair match outcome, kept as raw counts so corpora aggregate by summation."""

    thresholds: tuple
    n_matches: int
    correct: np.ndarray  # per threshold, among all matches
    flat_keypoints: int
    flat_matches: int
    flat_correct: np.ndarray  # per threshold, matches whose A keypoint is flat
    textured_keypoints: int
    textured_matches: int
    textured_correct: np.ndarray


@dataclass
class CorpusEval:
    thresholds: tuple
    pairs: list = field(default_factory=list)

    def _sum(self, attr):
        return sum(getattr(p, attr) for p in self.pairs)

    def mma(self) -> np.ndarray:
        """Correct matches / matches, per threshold."""
        n = self._sum("n_matches")
        return self._sum("correct") / n if n else np.zeros(len(self.thresholds))

    def region_rate(self, region: str) -> np.ndarray:
        """Correctly matched keypoints / keypoints in the region, per threshold."""
        n = self._sum(f"{region}_keypoints")
        return self._sum(f"{region}_correct") / n if n else np.zeros(len(self.thresholds))

    def region_mma(self, region: str) -> np.ndarray:
        n = self._sum(f"{region}_matches")
        return self._sum(f"{region}_correct") / n if n else np.zeros(len(self.thresholds))


def evaluate_pair(image1, image2, true_h, weights, config, thresholds=(1, 3, 5), stride=8,
                  margin=PAIR_MARGIN, low_only=False, mutual=True) -> PairEval:
    th = tuple(float(t) for t in thresholds)
    f1 = describe(image1, weights, config, low_only=low_only)
    f2 = describe(image2, weights, config, low_only=low_only)
    kp1 = uniform_grid(*f1.shape[:2], stride, margin)
    kp2 = uniform_grid(*f2.shape[:2], stride, margin)
    energy = gradient_energy(image1)
    flat_kp = energy[kp1[:, 1], kp1[:, 0]] < FLAT_ENERGY
    if kp1.shape[0] == 0 or kp2.shape[0] == 0:
        matches = []
    else:
        matches = mutual_nn_match(sample_descriptors(f1, kp1), sample_descriptors(f2, kp2), mutual=mutual)
    err = match_errors(matches, kp1, kp2, true_h)
    ia = np.array([m.idx_a for m in matches], dtype=np.int64)
    ok = err[:, None] <= np.array(th)[None, :] if err.size else np.zeros((0, len(th)), dtype=bool)
    flat_m = flat_kp[ia] if ia.size else np.zeros(0, dtype=bool)
    return PairEval(
        th, len(matches), ok.sum(axis=0),
        int(flat_kp.sum()), int(flat_m.sum()), ok[flat_m].sum(axis=0),
        int((~flat_kp).sum()), int((~flat_m).sum()), ok[~flat_m].sum(axis=0),
    )


def evaluate_pairs(pairs, weights, config, thresholds=(1, 3, 5), stride=8, low_only=False,
                   mutual=True) -> CorpusEval:
    """``pairs`` yields (image1, image2, homography matrix) triples or :class:`TrainingPair`."""
    out = CorpusEval(tuple(float(t) for t in thresholds))
    for p in pairs:
        if hasattr(p, "model"):
            p = (p.image1, p.image2, p.model.m)
        out.pairs.append(evaluate_pair(p[0], p[1], p[2], weights, config, thresholds, stride,
                                       low_only=low_only, mutual=mutual))
    return out
