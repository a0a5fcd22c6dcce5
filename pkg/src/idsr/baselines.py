"""Reference recommenders: popularity, a relevance-only GRU, and MMR re-ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import GenreCatalog, SequenceSet
from .metrics import distance_matrix
from .model import GRUEncoder, xavier_uniform_
from .objective import LossBreakdown


def top_n(scores, n: int) -> np.ndarray:
    """Indices of the ``n`` largest scores per row, ties to the smaller index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :n]


def item_counts(train: SequenceSet, n_items: int) -> np.ndarray:
    """Interactions per item over training inputs and targets."""
    seen = np.concatenate([train.inputs.ravel(), train.targets])
    return np.bincount(seen, minlength=n_items)


def pop_recommend(train: SequenceSet, n: int, n_items: int | None = None) -> np.ndarray:
    if len(train) == 0:
        raise ValueError("empty training split")
    if n_items is None:
        n_items = int(train.items_seen().max()) + 1
    return top_n(item_counts(train, n_items), n)


class PopModel:
    """Static popularity list exposed through the ``recommend`` interface."""

    def __init__(self, train: SequenceSet, n_items: int):
        self.counts = item_counts(train, n_items)
        self.n_items = n_items
        self.training = False

    def train(self, mode: bool = True):
        return self

    def eval(self):
        return self

    def recommend(self, items: torch.Tensor, n: int) -> torch.Tensor:
        row = torch.as_tensor(top_n(self.counts, n))
        return row.expand(items.shape[0], -1)

    def meta(self) -> dict:
        return {"model": "pop", "n_items": self.n_items}


class NextItemGRU(nn.Module):
    """GRU encoder with a full-softmax next-item head over the shared item table.

    Trained with cross-entropy on the target; recommendations are the top of
    the softmax.
    """

    def __init__(self, n_items: int, d_e: int = 100, dropout: float = 0.1):
        super().__init__()
        self.n_items = n_items
        self.d_e = d_e
        self.item_embeddings = nn.Parameter(torch.empty(n_items, d_e))
        self.encoder = GRUEncoder(d_e, d_e)
        self.dropout = nn.Dropout(dropout)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for p in self.parameters():
            xavier_uniform_(p, generator)

    def relevance_logits(self, items: torch.Tensor) -> torch.Tensor:
        if items.numel() and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError(f"item index out of range [0, {self.n_items})")
        H = self.encoder(self.dropout(self.item_embeddings[items]))
        return H[:, -1] @ self.item_embeddings.T

    def relevance_scores(self, items: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.relevance_logits(items), dim=-1)

    def training_loss(self, items: torch.Tensor, targets: torch.Tensor, n: int):
        loss = nn.functional.cross_entropy(self.relevance_logits(items), targets)
        value = loss.item()
        return loss, LossBreakdown(value, value, 0.0, 1.0)

    @torch.no_grad()
    def recommend(self, items: torch.Tensor, n: int) -> torch.Tensor:
        logits = self.relevance_logits(items)
        return torch.sort(logits, dim=-1, descending=True, stable=True).indices[:, :n]

    def meta(self) -> dict:
        return {"model": "gru", "n_items": self.n_items, "d_e": self.d_e, "dropout": self.dropout.p}


def train_next_item(config, split, catalog: GenreCatalog, n_items: int, **kwargs):
    """Train the relevance-only GRU with the shared trainer plumbing."""
    from .trainer import TrainConfig, train

    cfg = TrainConfig.from_dict({**config.to_dict(), "model": "gru", "lam": 1.0})
    return train(cfg, split, catalog, n_items, **kwargs)


@dataclass
class BaselineScores:
    """Per-sample candidate items (best first) and their relevance scores."""

    items: np.ndarray  # (B, C)
    scores: np.ndarray  # (B, C)
    tag: str = ""


@torch.no_grad()
def candidate_scores(model, samples: SequenceSet, c: int, batch_size: int = 1024, tag: str = "gru") -> BaselineScores:
    """Top-``c`` items of a next-item model with their raw relevance scores (logits).

    Logits equal log-probabilities up to a per-sample constant, which MMR's
    argmax ignores.
    """
    model.eval()
    items, scores = [], []
    for s in range(0, len(samples), batch_size):
        logits = model.relevance_logits(torch.as_tensor(samples.inputs[s:s + batch_size])).double().numpy()
        top = top_n(logits, c)
        items.append(top)
        scores.append(np.take_along_axis(logits, top, axis=1))
    return BaselineScores(np.concatenate(items), np.concatenate(scores), tag)


def write_scores(path, scores: BaselineScores) -> None:
    with open(path, "w") as f:
        f.write(f"# tag={scores.tag}\n")
        f.write("sample\trank\titem\tscore\n")
        for s, (items, vals) in enumerate(zip(scores.items, scores.scores)):
            for r, (i, v) in enumerate(zip(items, vals), start=1):
                f.write(f"{s}\t{r}\t{int(i)}\t{float(v)!r}\n")


def read_scores(path) -> BaselineScores:
    with open(path) as f:
        tag = f.readline().strip().partition("tag=")[2]
        f.readline()
        rows = np.loadtxt(f, delimiter="\t", ndmin=2)
    n = int(rows[:, 0].max()) + 1
    c = int(rows[:, 1].max())
    items = np.zeros((n, c), dtype=np.int64)
    vals = np.zeros((n, c))
    items[rows[:, 0].astype(int), rows[:, 1].astype(int) - 1] = rows[:, 2].astype(np.int64)
    vals[rows[:, 0].astype(int), rows[:, 1].astype(int) - 1] = rows[:, 3]
    return BaselineScores(items, vals, tag)


def mmr_rerank(scores: BaselineScores, c: int, theta: float, n: int, catalog: GenreCatalog | None = None,
               dist: np.ndarray | None = None) -> np.ndarray:
    """Maximal marginal relevance over each sample's top-``c`` candidates.

    Each step picks argmax of theta * S(v) + (1 - theta) * min_{k in list} d(k, v);
    the min over an empty list counts as 0. Ties go to the smaller item index.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if c < n:
        raise ValueError(f"candidate size {c} smaller than list length {n}")
    if dist is None:
        dist = distance_matrix(catalog)
    cand = scores.items[:, :c]
    rel = scores.scores[:, :c]
    if cand.shape[1] < c:
        raise ValueError(f"only {cand.shape[1]} candidates available, need {c}")
    B = cand.shape[0]
    rows = np.arange(B)
    taken = np.zeros((B, c), dtype=bool)
    min_d = np.zeros((B, c))
    big = np.iinfo(np.int64).max
    out = np.zeros((B, n), dtype=np.int64)
    for t in range(n):
        crit = theta * rel + (1 - theta) * min_d
        crit[taken] = -np.inf
        best = crit.max(axis=1, keepdims=True)
        j = np.where(crit == best, cand, big).argmin(axis=1)
        item = cand[rows, j]
        out[:, t] = item
        taken[rows, j] = True
        d_new = dist[cand, item[:, None]]
        min_d = d_new if t == 0 else np.minimum(min_d, d_new)
    return out
