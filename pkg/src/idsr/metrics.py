"""Recall@K, MRR@K and intra-list distance over genre vectors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import GenreCatalog


def recall_at_k(items, target: int, k: int) -> int:
    return int(target in list(items[:k]))


def mrr_at_k(items, target: int, k: int) -> float:
    for rank, item in enumerate(items[:k], start=1):
        if item == target:
            return 1.0 / rank
    return 0.0


def genre_distance(catalog: GenreCatalog, i: int, j: int) -> float:
    n = len(catalog.vectors)
    for item in (i, j):
        if not 0 <= item < n:
            raise KeyError(f"item {item} not in genre catalog ({n} items)")
    diff = catalog.vectors[i].astype(np.float64) - catalog.vectors[j].astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))


def distance_matrix(catalog: GenreCatalog) -> np.ndarray:
    """Pairwise Euclidean genre distances, shape (n_items, n_items)."""
    x = catalog.vectors.astype(np.float64)
    sq = (x * x).sum(axis=1)
    # binary vectors: squared distance is an exact small integer
    d2 = np.rint(sq[:, None] + sq[None, :] - 2.0 * x @ x.T)
    return np.sqrt(np.maximum(d2, 0.0))


def ild_at_k(items, k: int, catalog: GenreCatalog, dist: np.ndarray | None = None) -> float:
    """Mean pairwise genre distance over the first ``k`` items."""
    if k < 2:
        raise ValueError("ILD needs k >= 2")
    top = np.asarray(items[:k], dtype=np.int64)
    if len(top) < k:
        raise ValueError(f"list has {len(top)} items, fewer than k={k}")
    if dist is None:
        dist = distance_matrix(catalog)
    sub = dist[np.ix_(top, top)]
    return float(sub[np.triu_indices(k, 1)].sum() * 2.0 / (k * (k - 1)))


def batch_ild(lists: np.ndarray, k: int, dist: np.ndarray) -> np.ndarray:
    """ILD@k for every row of ``lists`` (n, >=k)."""
    if k < 2:
        raise ValueError("ILD needs k >= 2")
    top = lists[:, :k]
    sub = dist[top[:, :, None], top[:, None, :]]
    return sub.sum(axis=(1, 2)) / (k * (k - 1))


def batch_ranks(lists: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target in its list, 0 when absent."""
    hits = lists == targets[:, None]
    return np.where(hits.any(axis=1), hits.argmax(axis=1) + 1, 0)


@dataclass
class MetricsReport:
    ks: list[int]
    recall: dict[int, float]
    mrr: dict[int, float]
    ild: dict[int, float]
    n_samples: int
    config: dict = field(default_factory=dict)

    def row(self) -> dict[str, float]:
        out = {}
        for name in ("recall", "mrr", "ild"):
            for k in self.ks:
                out[f"{name}@{k}"] = getattr(self, name)[k]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("recall", "mrr", "ild"):
            d[name] = {str(k): v for k, v in d[name].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        conv = {name: {int(k): float(v) for k, v in d[name].items()} for name in ("recall", "mrr", "ild")}
        return cls(ks=[int(k) for k in d["ks"]], n_samples=int(d["n_samples"]), config=d.get("config", {}), **conv)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_lists(lists, targets, ks, catalog: GenreCatalog, dist=None, config=None) -> MetricsReport:
    """Average Recall/MRR/ILD over samples; ``lists`` must have >= max(ks) columns."""
    lists = np.asarray(lists, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    ks = sorted(int(k) for k in ks)
    if lists.shape[1] < ks[-1]:
        raise ValueError(f"lists have {lists.shape[1]} items, need {ks[-1]}")
    if dist is None:
        dist = distance_matrix(catalog)
    ranks = batch_ranks(lists[:, : ks[-1]], targets)
    recall, mrr, ild = {}, {}, {}
    for k in ks:
        hit = (ranks > 0) & (ranks <= k)
        recall[k] = float(hit.mean())
        mrr[k] = float(np.where(hit, 1.0 / np.maximum(ranks, 1), 0.0).mean())
        ild[k] = float(batch_ild(lists, k, dist).mean())
    return MetricsReport(ks, recall, mrr, ild, len(targets), dict(config or {}))
