"""Scalar brute-force transcriptions of the core formulas.

These use plain Python loops and ``math`` only, so they share no code path
with the vectorized library. ``run_all`` compares both on seeded instances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import label_rectify as lr
from .metrics import calibration
from .semantic_space import contrastive_loss


def scalar_contrastive_loss(features, labels, prototypes, tau):
    feats = [list(map(float, f)) for f in features]
    protos = [list(map(float, c)) for c in prototypes]
    labels = [int(y) for y in labels]

    def dot(a, b):
        s = 0.0
        for u, v in zip(a, b):
            s += u * v
        return s

    num_classes = len(protos)
    members = {l: [f for f, y in zip(feats, labels) if y == l] + [protos[l]]
               for l in range(num_classes)}
    total = 0.0
    for i, (zi, yi) in enumerate(zip(feats, labels)):
        denom = 0.0
        for l in range(num_classes):
            a_l = members[l]
            inner = 0.0
            for zj in a_l:
                inner += math.exp(dot(zi, zj) / tau)
            denom += inner / len(a_l)
        positives = [f for j, (f, y) in enumerate(zip(feats, labels)) if y == yi and j != i]
        positives.append(protos[yi])
        acc = 0.0
        for zp in positives:
            acc += math.log(math.exp(dot(zi, zp) / tau) / denom)
        total += -acc / len(positives)
    return total / len(feats)


def scalar_similarity(feature, centers, metric="euclid"):
    out = []
    for c in centers:
        if metric == "euclid":
            sq = 0.0
            for u, v in zip(feature, c):
                sq += (u - v) * (u - v)
            out.append(1.0 / max(math.sqrt(sq), 1e-8))
        else:
            d = 0.0
            for u, v in zip(feature, c):
                d += u * v
            out.append((1.0 + d) / 2.0 + 1e-8)
    return out


def scalar_semantic_label(sim, K, fg, bg, force_include=True):
    n = len(sim)
    support = set()
    if force_include:
        support.add(fg)
        support.add(bg)
    # selection sort by (-sim, id); stops when K members are chosen
    remaining = [i for i in range(n) if i not in support]
    while len(support) < K:
        best = remaining[0]
        for i in remaining[1:]:
            if sim[i] > sim[best]:
                best = i
        remaining.remove(best)
        support.add(best)
    total = 0.0
    for i in range(n):
        if i in support:
            total += sim[i]
    return [sim[i] / total if i in support else 0.0 for i in range(n)]


def scalar_confidence(lam, n_fg, n_bg, counts, omega, phi):
    def act(n):
        return math.log(n + 1.0) if phi == "log" else float(n)

    n_x = lam * n_fg + (1.0 - lam) * n_bg
    total = 0.0
    for n in counts:
        total += act(n)
    g = omega * act(n_x) / total
    return min(max(g, 0.0), 1.0)


def scalar_rectify(area, semantic, gamma):
    return [(1.0 - gamma) * a + gamma * s for a, s in zip(area, semantic)]


def scalar_algorithm(feature, centers, area, fg, bg, lam, counts, K, omega, phi, metric):
    sim = scalar_similarity(feature, centers, metric)
    y_s = scalar_semantic_label(sim, K, fg, bg, True)
    gamma = scalar_confidence(lam, counts[fg], counts[bg], counts, omega, phi)
    return scalar_rectify(area, y_s, gamma), gamma


def scalar_ece(confidences, correct, n_bins):
    n = len(confidences)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [i for i in range(n)
                   if (lo < confidences[i] <= hi) or (b == 0 and confidences[i] <= 0.0)]
        if not members:
            continue
        acc = sum(correct[i] for i in members) / len(members)
        conf = sum(confidences[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - conf)
    return total * 100.0


@dataclass
class OracleResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


def check_contrastive(n_cases=1000, seed=0, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(n_cases):
        k = int(rng.integers(2, 7))
        b = int(rng.integers(1, 7))
        d = int(rng.integers(2, 5))
        tau = float(rng.uniform(0.1, 1.0))
        feats, protos = _unit_rows(rng, b, d), _unit_rows(rng, k, d)
        labels = rng.integers(0, k, size=b)
        got = contrastive_loss(feats, labels, protos, tau)[0]
        want = scalar_contrastive_loss(feats, labels, protos, tau)
        err = _rel(got, want)
        worst = max(worst, err)
        if err > tol:
            return OracleResult("contrastive loss", case + 1, worst, tol,
                                f"case {case}: labels={labels.tolist()} tau={tau} "
                                f"library={got!r} oracle={want!r}")
    return OracleResult("contrastive loss", n_cases, worst, tol)


def check_similarity_topk(n_cases=1000, seed=1, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(n_cases):
        k = int(rng.integers(2, 7))
        d = int(rng.integers(1, 4))
        metric = lr.METRICS[case % 2]
        z = _unit_rows(rng, 1, d)[0]
        centers = _unit_rows(rng, k, d)
        sim = lr.similarity(z, centers, metric)
        want_sim = scalar_similarity(z, centers, metric)
        err = max(_rel(a, b) for a, b in zip(sim, want_sim))
        worst = max(worst, err)
        K = int(rng.integers(2, k + 1))
        fg, bg = (int(v) for v in rng.integers(0, k, size=2))
        label = lr.semantic_label(sim, K, fg, bg, True)
        want_label = scalar_semantic_label(list(sim), K, fg, bg, True)
        if err > tol or label.tolist() != want_label:
            return OracleResult("similarity + TopK label", case + 1, worst, tol,
                                f"case {case}: z={z.tolist()} centers={centers.tolist()} "
                                f"K={K} fg={fg} bg={bg} sim={sim.tolist()} "
                                f"library={label.tolist()} oracle={want_label}")
    return OracleResult("similarity + TopK label", n_cases, worst, tol)


def check_rectification(n_cases=1000, seed=2):
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        k = int(rng.integers(2, 7))
        d = int(rng.integers(1, 4))
        counts = [int(c) for c in rng.integers(1, 500, size=k)]
        z = _unit_rows(rng, 1, d)[0]
        centers = _unit_rows(rng, k, d)
        fg, bg = (int(v) for v in rng.integers(0, k, size=2))
        lam = float(rng.uniform(1e-3, 1.0))
        area = np.zeros(k)
        area[fg] += lam
        area[bg] += 1.0 - lam
        K = int(rng.integers(2, k + 1))
        omega = float(rng.choice([0.0, 8e-4 * k, rng.uniform(0.0, 5.0)]))
        phi = lr.PHI_KINDS[case % 2]
        metric = lr.METRICS[(case // 2) % 2]
        cfg = lr.RectifyConfig(K, omega, phi, metric)
        got = lr.rectify_sample(z, centers, area, fg, bg, lam, counts, cfg)
        want_y, want_gamma = scalar_algorithm(z, centers, area.tolist(), fg, bg, lam, counts,
                                              K, omega, phi, metric)
        if got.y.tolist() != want_y or got.gamma != want_gamma:
            return OracleResult("rectification + confidence (bit-exact)", case + 1, math.inf, 0.0,
                                f"case {case}: counts={counts} fg={fg} bg={bg} lam={lam!r} "
                                f"K={K} omega={omega!r} phi={phi} metric={metric} "
                                f"library={got.y.tolist()} gamma={got.gamma!r} "
                                f"oracle={want_y} gamma={want_gamma!r}")
    return OracleResult("rectification + confidence (bit-exact)", n_cases, 0.0, 0.0)


def check_ece(n_cases=1000, seed=3, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for case in range(n_cases):
        n = int(rng.integers(1, 60))
        n_bins = int(rng.integers(1, 20))
        conf = rng.uniform(0.0, 1.0, size=n)
        if case % 3 == 0:
            conf = np.round(conf * n_bins) / n_bins  # exercise bin edges
        correct = rng.random(n) < conf
        got = calibration(conf, correct, n_bins).ece
        want = scalar_ece(conf.tolist(), correct.astype(float).tolist(), n_bins)
        err = abs(got - want)
        worst = max(worst, err)
        if err > tol:
            return OracleResult("expected calibration error", case + 1, worst, tol,
                                f"case {case}: n_bins={n_bins} conf={conf.tolist()} "
                                f"correct={correct.tolist()} library={got!r} oracle={want!r}")
    return OracleResult("expected calibration error", n_cases, worst, tol)


CHECKS = (check_contrastive, check_similarity_topk, check_rectification, check_ece)


def run_all(n_cases: int = 1000, out=print) -> bool:
    start = time.perf_counter()
    ok = True
    for check in CHECKS:
        res = check(n_cases=n_cases)
        status = "PASS" if res.passed else "FAIL"
        out(f"[{status}] {res.name}: {res.cases} cases, max error {res.max_error:.3g} "
            f"(tol {res.tolerance:g})")
        if not res.passed:
            out(f"    failing instance: {res.failure}")
            ok = False
    out(f"oracle-check finished in {time.perf_counter() - start:.2f}s")
    return ok
