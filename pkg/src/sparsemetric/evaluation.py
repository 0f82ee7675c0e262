"""Ranking metrics for query/gallery retrieval: R@K, mAP, rSum, score histograms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KS = (1, 5, 10)


class GroundTruth:
    """Relevant gallery indices per query (one or many per query)."""

    def __init__(self, relevant, gallery_size: int):
        sets = [frozenset(int(g) for g in r) for r in relevant]
        for q, r in enumerate(sets):
            if not r:
                raise ValueError(f"query {q} has no relevant gallery item")
            if min(r) < 0 or max(r) >= gallery_size:
                raise ValueError(f"query {q} references gallery index outside [0, {gallery_size})")
        self.relevant = sets
        self.gallery_size = int(gallery_size)

    @classmethod
    def one_to_one(cls, n: int) -> "GroundTruth":
        return cls([[i] for i in range(n)], n)

    @classmethod
    def grouped(cls, n_queries: int, per_query: int) -> "GroundTruth":
        """Query ``q`` matches gallery items ``q*k .. q*k+k-1`` (e.g. five captions per image)."""
        return cls([range(q * per_query, (q + 1) * per_query) for q in range(n_queries)], n_queries * per_query)

    def __len__(self):
        return len(self.relevant)

    def inverse(self) -> "GroundTruth":
        """Swap the roles of queries and gallery."""
        back = [[] for _ in range(self.gallery_size)]
        for q, r in enumerate(self.relevant):
            for g in r:
                back[g].append(q)
        return GroundTruth(back, len(self.relevant))

    def mask(self) -> np.ndarray:
        m = np.zeros((len(self.relevant), self.gallery_size), dtype=bool)
        for q, r in enumerate(self.relevant):
            m[q, list(r)] = True
        return m


def rank_gallery(S) -> np.ndarray:
    """Gallery indices per query by descending score; ties go to the lower index."""
    S = np.atleast_2d(np.asarray(S))
    return np.argsort(-S, axis=1, kind="stable")


def _first_hit(rankings: np.ndarray, gt: GroundTruth) -> np.ndarray:
    hits = np.take_along_axis(gt.mask(), rankings, axis=1)
    return np.argmax(hits, axis=1)


def recall_at_k(rankings, gt: GroundTruth, k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    rankings = np.asarray(rankings)
    k = min(k, rankings.shape[1])
    first = _first_hit(rankings, gt)
    return 100.0 * float(np.sum(first < k)) / len(first)


def mean_average_precision(rankings, gt: GroundTruth) -> float:
    rankings = np.asarray(rankings)
    hits = np.take_along_axis(gt.mask(), rankings, axis=1)
    aps = []
    for row in hits:
        pos = np.flatnonzero(row)
        precisions = np.arange(1, len(pos) + 1) / (pos + 1)
        aps.append(precisions.mean())
    return 100.0 * float(np.mean(aps))


def rsum(values) -> float:
    values = list(values)
    if len(values) != 6:
        raise ValueError(f"rSum needs six R@K values, got {len(values)}")
    return float(sum(values))


@dataclass
class DirectionReport:
    recall: dict = field(default_factory=dict)
    mAP: float = 0.0


@dataclass
class RetrievalReport:
    """R@{1,5,10} and mAP for query->gallery (``forward``) and back."""

    forward: DirectionReport
    backward: DirectionReport

    @property
    def rsum(self) -> float:
        return rsum([self.forward.recall[k] for k in KS] + [self.backward.recall[k] for k in KS])

    def to_text(self, names=("x2y", "y2x")) -> str:
        lines = []
        for name, d in zip(names, (self.forward, self.backward)):
            for k in KS:
                lines.append(f"{name}_r{k}={d.recall[k]:.4f}")
            lines.append(f"{name}_map={d.mAP:.4f}")
        lines.append(f"rsum={self.rsum:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self, names=("x2y", "y2x")) -> str:
        rows = ["direction,r1,r5,r10,map"]
        for name, d in zip(names, (self.forward, self.backward)):
            rows.append(",".join([name] + [f"{d.recall[k]:.4f}" for k in KS] + [f"{d.mAP:.4f}"]))
        return "\n".join(rows) + "\n"


def direction_report(S, gt: GroundTruth) -> DirectionReport:
    ranks = rank_gallery(S)
    return DirectionReport({k: recall_at_k(ranks, gt, k) for k in KS}, mean_average_precision(ranks, gt))


def evaluate(S, gt: GroundTruth | None = None) -> RetrievalReport:
    """Report both directions of a query x gallery score matrix."""
    S = np.atleast_2d(np.asarray(S))
    if gt is None:
        gt = GroundTruth.one_to_one(S.shape[0])
    if S.shape != (len(gt), gt.gallery_size):
        raise ValueError(f"scores of shape {S.shape} do not match ground truth {(len(gt), gt.gallery_size)}")
    return RetrievalReport(direction_report(S, gt), direction_report(S.T, gt.inverse()))


def similarity_histogram(S, gt: GroundTruth, bins: int = 50):
    """Positive- and negative-pair score counts over shared equal-width bins.

    Returns ``(centers, positive_counts, negative_counts)``; the bins span
    ``[min(S), max(S)]``.
    """
    if bins < 2:
        raise ValueError("need at least two bins")
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    m = gt.mask()
    lo, hi = float(S.min()), float(S.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    pos, _ = np.histogram(S[m], bins=edges)
    neg, _ = np.histogram(S[~m], bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, pos, neg


def histogram_text(centers, pos, neg) -> str:
    lines = ["# class=positive"]
    lines += [f"{c:.6f} {int(n)}" for c, n in zip(centers, pos)]
    lines.append("# class=negative")
    lines += [f"{c:.6f} {int(n)}" for c, n in zip(centers, neg)]
    return "\n".join(lines) + "\n"
