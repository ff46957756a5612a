"""Semantically consistent labels and confidence-weighted label rectification.

Per synthetic sample: similarities to the class centers, a TopK-restricted
sum-normalized label, a head/tail-aware confidence from the effective sample
count, and the convex blend with the CutMix area label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DIST_EPS = 1e-8
COSINE_EPS = 1e-8

PHI_KINDS = ("log", "linear")
METRICS = ("euclid", "cosine")


@dataclass(frozen=True)
class RectifyConfig:
    K: int
    omega: float
    phi: str = "log"
    metric: str = "euclid"
    force_include_mixed: bool = True

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.phi not in PHI_KINDS:
            raise ValueError(f"phi must be one of {PHI_KINDS}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    def check(self, num_classes: int):
        if self.K > num_classes:
            raise ValueError(f"K={self.K} exceeds the number of classes {num_classes}")


@dataclass(frozen=True, eq=False)
class RectifiedLabel:
    y: np.ndarray
    gamma: float
    semantic: np.ndarray
    area: np.ndarray


def default_K(num_classes: int) -> int:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return max(2, min(math.floor(0.3 * num_classes + 0.5), 30))


def default_omega(num_classes: int) -> float:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return 8e-4 * num_classes


def similarity(feature, centers, metric: str = "euclid") -> np.ndarray:
    """Positive similarity of one feature to every center.

    ``euclid``: reciprocal Euclidean distance, distance floored at 1e-8.
    ``cosine``: ``(1 + z.c) / 2 + 1e-8``.
    """
    feature = np.asarray(feature, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if metric == "euclid":
        diff = feature[None, :] - centers
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        return 1.0 / np.maximum(dist, DIST_EPS)
    if metric == "cosine":
        return (1.0 + np.sum(centers * feature[None, :], axis=1)) / 2.0 + COSINE_EPS
    raise ValueError(f"unknown metric {metric!r}")


def topk_support(sim, K: int, fg: int, bg: int, force_include: bool = True) -> np.ndarray:
    """Boolean mask of the K support classes.

    Classes are ranked by descending similarity, ties by ascending id. With
    ``force_include`` the mixed classes take their seats first and the rest
    fill from the ranking, which evicts the lowest-ranked non-mixed classes.
    """
    sim = np.asarray(sim)
    if not 2 <= K <= len(sim):
        raise ValueError(f"K={K} outside [2, {len(sim)}]")
    order = np.argsort(-sim, kind="stable")
    if force_include:
        forced = [fg] if fg == bg else [fg, bg]
        order = forced + [int(c) for c in order if c not in forced]
    mask = np.zeros(len(sim), dtype=bool)
    mask[np.asarray(order[:K])] = True
    return mask


def semantic_label(sim, K: int, fg: int, bg: int, force_include: bool = True) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    kept = np.where(topk_support(sim, K, fg, bg, force_include), sim, 0.0)
    return kept / kept.sum()


def effective_count(lambda_eff: float, n_fg: int, n_bg: int) -> float:
    return lambda_eff * n_fg + (1.0 - lambda_eff) * n_bg


def phi(n: float, kind: str = "log") -> float:
    if kind == "log":
        return math.log(n + 1.0)
    if kind == "linear":
        return float(n)
    raise ValueError(f"unknown activation {kind!r}")


def confidence(n_x: float, counts, omega: float, kind: str = "log") -> float:
    """``omega * phi(N_x) / sum_i phi(N_i)`` clamped to [0, 1]."""
    total = 0.0
    for n in counts:
        total += phi(n, kind)
    gamma = omega * phi(n_x, kind) / total
    return min(max(gamma, 0.0), 1.0)


def rectify(area, semantic, gamma: float) -> RectifiedLabel:
    area = np.asarray(area, dtype=np.float64)
    semantic = np.asarray(semantic, dtype=np.float64)
    y = (1.0 - gamma) * area + gamma * semantic
    return RectifiedLabel(y, gamma, semantic, area)


def rectify_sample(feature, centers, area, fg: int, bg: int, lambda_eff: float,
                   counts, config: RectifyConfig) -> RectifiedLabel:
    """The full per-sample rectification for one synthetic sample."""
    sim = similarity(feature, centers, config.metric)
    y_s = semantic_label(sim, config.K, fg, bg, config.force_include_mixed)
    n_x = effective_count(lambda_eff, counts[fg], counts[bg])
    gamma = confidence(n_x, counts, config.omega, config.phi)
    return rectify(area, y_s, gamma)
