"""Retrieval evaluation over an embedded gallery: Recall@K, mAP, PR curve.

Every gallery item is used as a query against the rest of the gallery.
Similarity is cosine; ties are broken by the items' ids (lower first).
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import ContractError

THREADS_ENV = "RETRIEVAL_LAB_THREADS"
DEFAULT_KS = (1, 2, 4)


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError(f"zero-norm feature row {int(np.flatnonzero(norms == 0)[0])}")
    return x / norms


@dataclass
class RetrievalIndex:
    """L2-normalised gallery with labels and tie-break ids."""

    features: np.ndarray
    labels: np.ndarray
    ids: Optional[np.ndarray] = None
    _relevance: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        n = len(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractError(f"{self.features.shape} features for {n} labels")
        if n < 2:
            raise ContractError("gallery needs at least two items")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ContractError("gallery features must have unit L2 norm; use RetrievalIndex.build")
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        _, counts = np.unique(self.labels, return_counts=True)
        if np.any(counts < 2):
            raise ContractError("every class in the gallery needs at least two members")

    @classmethod
    def build(cls, features, labels, ids=None) -> "RetrievalIndex":
        return cls(l2_normalize(features), labels, ids)

    def __len__(self) -> int:
        return len(self.labels)

    def relevance(self) -> np.ndarray:
        """Boolean N×(N−1) matrix: row q lists same-class flags in rank order."""
        if self._relevance is None:
            self._relevance = _relevance_matrix(self)
        return self._relevance


def _rank_rows(index: RetrievalIndex, rows: np.ndarray) -> np.ndarray:
    n = len(index)
    sim = index.features[rows] @ index.features.T
    out = np.empty((len(rows), n - 1), dtype=bool)
    for j, q in enumerate(rows):
        others = np.delete(np.arange(n), q)
        # primary key: descending similarity, secondary: ascending id
        order = np.lexsort((index.ids[others], -sim[j, others]))
        out[j] = index.labels[others[order]] == index.labels[q]
    return out


def _relevance_matrix(index: RetrievalIndex) -> np.ndarray:
    n = len(index)
    threads = eval_threads()
    if threads == 1 or n < 256:
        return _rank_rows(index, np.arange(n))
    chunks = np.array_split(np.arange(n), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda rows: _rank_rows(index, rows), chunks))
    return np.concatenate(parts, axis=0)


def _check_ks(index: RetrievalIndex, ks: Sequence[int]) -> None:
    for k in ks:
        if not 1 <= k < len(index):
            raise ContractError(f"K={k} must satisfy 1 <= K < gallery size {len(index)}")


def recall_at_k(index: RetrievalIndex, ks: Sequence[int] = DEFAULT_KS) -> Dict[int, float]:
    _check_ks(index, ks)
    rel = index.relevance()
    first_hit = np.where(rel.any(axis=1), rel.argmax(axis=1), rel.shape[1])
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def average_precisions(index: RetrievalIndex) -> np.ndarray:
    rel = index.relevance()
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    precision_at_hits = np.where(rel, hits / ranks, 0.0)
    # running sums in rank order, independent of numpy's pairwise blocking
    return np.cumsum(precision_at_hits, axis=1)[:, -1] / rel.sum(axis=1)


def mean_average_precision(index: RetrievalIndex) -> float:
    ap = average_precisions(index)
    return float(np.cumsum(ap)[-1] / len(ap))


def pr_curve(index: RetrievalIndex) -> List[Tuple[float, float]]:
    """Micro-averaged (recall, precision) at every rank cutoff 1..N−1."""
    rel = index.relevance()
    n_queries, n_cut = rel.shape
    retrieved_rel = np.cumsum(rel, axis=1).sum(axis=0)
    total_rel = rel.sum()
    cutoffs = np.arange(1, n_cut + 1)
    recall = retrieved_rel / total_rel
    precision = retrieved_rel / (n_queries * cutoffs)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def evaluate(features, labels, ks: Sequence[int] = DEFAULT_KS, with_pr: bool = True) -> dict:
    """All metrics for one gallery, as plain python values."""
    index = RetrievalIndex.build(features, labels)
    out = {
        "recall": {str(k): v for k, v in recall_at_k(index, ks).items()},
        "map": mean_average_precision(index),
        "n": len(index),
    }
    if with_pr:
        out["pr"] = [list(p) for p in pr_curve(index)]
    return out


# --------------------------------------------------------------- export
def export_embeddings(net, x: np.ndarray, labels: Sequence[int], path) -> Path:
    """Write ``label,f0..f{d-1}`` CSV rows of ``net`` features for ``x``."""
    feats = net.features(np.asarray(x, dtype=np.float64))
    return write_feature_csv(path, feats, labels)


def write_feature_csv(path, features: np.ndarray, labels: Sequence[int]) -> Path:
    path = Path(path)
    features = np.asarray(features, dtype=np.float64)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", *[f"f{i}" for i in range(features.shape[1])]])
            for lab, row in zip(labels, features):
                writer.writerow([int(lab), *[format(v, ".17g") for v in row]])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path
