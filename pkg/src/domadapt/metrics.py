"""Ranking and classification metrics, plus training-dynamics summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np


@dataclass(frozen=True)
class Ranking:
    ids: np.ndarray
    scores: np.ndarray
    relevant: np.ndarray

    @classmethod
    def from_scores(cls, scores, relevant, ids=None) -> "Ranking":
        scores = np.asarray(scores, dtype=float)
        relevant = np.asarray(relevant, dtype=bool)
        ids = np.arange(scores.size) if ids is None else np.asarray(ids)
        if len(set(ids.tolist())) != ids.size:
            raise ValueError("ranking ids must be unique")
        # descending score, lower id first on ties
        order = np.lexsort((ids, -scores))
        return cls(ids[order], scores[order], relevant[order])


def average_precision(ranking) -> float:
    """Mean of precision@p over the relevant positions p; 0 with nothing relevant.

    Accepts a Ranking or a relevance sequence already in ranked order.
    """
    rel = ranking.relevant if isinstance(ranking, Ranking) else np.asarray(ranking, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float((hits[rel] / ranks).sum() / n_rel)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na = np.where(na < 1e-12, np.inf, na)
    nb = np.where(nb < 1e-12, np.inf, nb)
    return (a / na) @ (b / nb).T


def cross_domain_ap(anchor, anchor_label, cand_features, cand_labels) -> float:
    cand_features = np.atleast_2d(np.asarray(cand_features, dtype=float))
    if cand_features.shape[0] < 1:
        raise ValueError("cross_domain_ap needs at least one candidate")
    sims = _cosine_matrix(np.asarray(anchor, dtype=float)[None, :], cand_features)[0]
    ranking = Ranking.from_scores(sims, np.asarray(cand_labels) == anchor_label)
    return average_precision(ranking)


def cross_domain_ap_batch(anchors, anchor_labels, cand_features, cand_labels) -> np.ndarray:
    """AP of every anchor against the same candidate pool (vectorised cross_domain_ap)."""
    sims = _cosine_matrix(np.asarray(anchors, float), np.asarray(cand_features, float))
    order = np.argsort(-sims, axis=1, kind="stable")
    rel = np.asarray(cand_labels)[order] == np.asarray(anchor_labels)[:, None]
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    n_rel = rel.sum(axis=1)
    prec_sum = (rel * hits / ranks).sum(axis=1)
    return np.where(n_rel > 0, prec_sum / np.maximum(n_rel, 1), 0.0)


def accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"accuracy needs equal non-empty lengths, got {p.shape} and {y.shape}")
    return float((p == y).mean())


@dataclass
class DynamicsSummary:
    certainty_per_epoch: dict[int, float]
    k_first: float | None
    k_last: float | None
    window: int

    @property
    def k_available(self) -> bool:
        return self.k_first is not None

    @property
    def certainty_rose(self) -> bool:
        epochs = sorted(self.certainty_per_epoch)
        return len(epochs) >= 2 and self.certainty_per_epoch[epochs[-1]] > self.certainty_per_epoch[epochs[0]]

    @property
    def k_not_smaller(self) -> bool:
        return self.k_available and self.k_last >= self.k_first


def dynamics_stats(history: Iterable[Mapping], window: int = 150) -> DynamicsSummary:
    """Per-epoch mean certainty and mean k over the first/last ``window`` iterations.

    Records need ``epoch``, ``mean_certainty`` and ``k``.  With fewer than
    2 * window records the k comparison is marked unavailable.
    """
    history = list(history)
    per_epoch: dict[int, list[float]] = {}
    for rec in history:
        per_epoch.setdefault(int(rec["epoch"]), []).append(float(rec["mean_certainty"]))
    cert = {e: float(np.mean(v)) for e, v in sorted(per_epoch.items())}
    if len(history) < 2 * window:
        return DynamicsSummary(cert, None, None, window)
    ks = np.array([float(r["k"]) for r in history])
    return DynamicsSummary(cert, float(ks[:window].mean()), float(ks[-window:].mean()), window)
