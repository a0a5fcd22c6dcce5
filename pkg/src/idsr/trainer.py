"""Training loop, validation-driven model selection, checkpoints and evaluation."""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, GenreCatalog, SequenceSet
from .metrics import MetricsReport, distance_matrix, evaluate_lists
from .model import IDSR

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODELS = ("idsr", "gru")
SELECTION_METRICS = ("recall", "composite")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "idsr"
    d_e: int = 100
    d: int = 100
    n_intents: int = 3
    lam: float = 0.5
    n_train: int = 10
    batch_size: int = 128
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    clip_norm: float = 5.0
    selection: str = "recall"
    selection_k: int = 20
    eval_batch_size: int = 1024

    def validate(self) -> "TrainConfig":
        if self.model not in MODELS:
            raise ConfigError(f"model: expected one of {MODELS}, got {self.model!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam: must lie in [0, 1], got {self.lam}")
        for key in ("lr", "eps", "clip_norm"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be positive")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"{key}: must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout: must lie in [0, 1)")
        for key in ("d_e", "d", "n_intents", "n_train", "batch_size", "max_epochs", "selection_k", "eval_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience: must be >= 0")
        if self.d != self.d_e:
            raise ConfigError(f"d: must equal d_e ({self.d_e}) so intent vectors share the item space")
        if self.selection not in SELECTION_METRICS:
            raise ConfigError(f"selection: expected one of {SELECTION_METRICS}")
        return self

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(names))
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        kwargs = {}
        for key, value in raw.items():
            default = names[key].default
            try:
                kwargs[key] = type(default)(value) if not isinstance(default, str) else str(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None
            if isinstance(default, int) and not isinstance(default, bool) and kwargs[key] != value:
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_model(config: TrainConfig, n_items: int):
    if config.model == "idsr":
        return IDSR(n_items, config.d_e, config.d, config.n_intents, config.dropout, config.lam)
    from .baselines import NextItemGRU

    return NextItemGRU(n_items, config.d_e, config.dropout)


def initialize(config: TrainConfig, n_items: int):
    """Fresh model with every matrix drawn Xavier-uniform from the config seed."""
    config.validate()
    model = build_model(config, n_items)
    model.reset_parameters(torch.Generator().manual_seed(config.seed))
    return model


def make_optimizer(model, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path, model, config: TrainConfig | None = None, **meta) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": {**model.meta(), **meta, "config": config.to_dict() if config else None},
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if "optimizer" in meta:
        payload["optimizer"] = payload["meta"].pop("optimizer")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """-> (model in eval mode, meta dict, optimizer state or None)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = payload["meta"]
    if meta["model"] == "idsr":
        model = IDSR(meta["n_items"], meta["d_e"], meta["d"], meta["n_intents"], meta["dropout"], meta["lam"])
    else:
        from .baselines import NextItemGRU

        model = NextItemGRU(meta["n_items"], meta["d_e"], meta["dropout"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model, meta, payload.get("optimizer")


# --- evaluation -------------------------------------------------------------


@torch.no_grad()
def _flushing() -> bool:
    return torch.tensor([1e-40]).mul(1.0).item() == 0.0


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormal floats to zero inside the block, then restore the prior mode.

    Trained intent distributions are near one-hot; their subnormal tails slow
    CPU kernels about fivefold and carry no usable precision.
    """
    before = _flushing()
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(before)


def recommend_all(model, samples: SequenceSet, n: int, batch_size: int = 1024) -> np.ndarray:
    with flush_denormals():
        return _recommend_all(model, samples, n, batch_size)


def _recommend_all(model, samples: SequenceSet, n: int, batch_size: int) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(samples), batch_size):
        x = torch.as_tensor(samples.inputs[s:s + batch_size])
        out.append(model.recommend(x, n).numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, n), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def evaluate(model, samples: SequenceSet, catalog: GenreCatalog, ks=(10, 20), batch_size: int = 1024,
             dist=None, config=None) -> MetricsReport:
    """Recall@K, MRR@K and ILD@K averaged over ``samples``; lists have length max(ks)."""
    lists = recommend_all(model, samples, max(ks), batch_size)
    return evaluate_lists(lists, samples.targets, ks, catalog, dist=dist, config=config)


# --- training ---------------------------------------------------------------


@dataclass
class TrainReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -math.inf
    stopped_early: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _selection_value(config: TrainConfig, report: MetricsReport, max_dist: float) -> float:
    k = config.selection_k
    if config.selection == "recall":
        return report.recall[k]
    return config.lam * report.recall[k] + (1 - config.lam) * report.ild[k] / max_dist


def train(
    config: TrainConfig,
    split: DatasetSplit,
    catalog: GenreCatalog,
    n_items: int,
    checkpoint_path=None,
    resume=None,
    on_epoch=None,
):
    """Adam on shuffled mini-batches with per-epoch validation and early stopping.

    Returns (best model in eval mode, TrainReport). ``on_epoch`` receives each
    epoch record as it is produced. Results are reproducible in serial mode.
    """
    config.validate()
    if len(split.train) == 0 or len(split.validation) == 0:
        raise TrainingError("train and validation splits must be non-empty")
    with flush_denormals():
        return _train(config, split, catalog, n_items, checkpoint_path, resume, on_epoch)


def _train(config, split, catalog, n_items, checkpoint_path, resume, on_epoch):
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dist = distance_matrix(catalog)
    max_dist = float(dist.max()) or 1.0
    eval_ks = sorted({10, config.selection_k})

    model = initialize(config, n_items)
    optimizer = make_optimizer(model, config)
    report = TrainReport(config=config.to_dict())
    start_epoch = 1
    bad_epochs = 0

    if resume is not None:
        resumed, meta, opt_state = load_checkpoint(resume)
        model.load_state_dict(resumed.state_dict())
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        val = evaluate(model, split.validation, catalog, eval_ks, config.eval_batch_size, dist)
        value = _selection_value(config, val, max_dist)
        record = {"epoch": meta.get("epoch", 0), "resumed": True, "validation": val.row(), "selection": value}
        stored = meta.get("selection")
        if stored is not None and value != stored:
            log.warning("resumed validation metric %.6f differs from stored %.6f", value, stored)
        report.epochs.append(record)
        report.best_epoch, report.best_metric = record["epoch"], value
        if on_epoch:
            on_epoch(record)
        start_epoch = record["epoch"] + 1

    best_state = copy.deepcopy(model.state_dict())
    best_opt = copy.deepcopy(optimizer.state_dict())
    t_start = time.perf_counter()
    train_set = split.train
    inputs = torch.as_tensor(train_set.inputs)
    targets = torch.as_tensor(train_set.targets)

    for epoch in range(start_epoch, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        n_seen = 0
        clipped = 0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[s:s + config.batch_size])
            loss, parts = model.training_loss(inputs[idx], targets[idx], config.n_train)
            if not math.isfinite(parts.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}: relevance={parts.relevance_term} "
                    f"diversity={parts.diversity_term} lam={parts.lam}"
                )
            optimizer.zero_grad()
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            if norm > config.clip_norm:
                clipped += 1
            optimizer.step()
            sums += len(idx) * np.array([parts.total, parts.relevance_term, parts.diversity_term])
            n_seen += len(idx)

        val = evaluate(model, split.validation, catalog, eval_ks, config.eval_batch_size, dist)
        value = _selection_value(config, val, max_dist)
        mean = sums / n_seen
        record = {
            "epoch": epoch,
            "loss": {"total": mean[0], "relevance_term": mean[1], "diversity_term": mean[2], "lam": config.lam},
            "validation": val.row(),
            "selection": value,
            "clipped_batches": clipped,
            "seconds": time.perf_counter() - t0,
        }
        if clipped:
            log.info("epoch %d: gradient norm clipped in %d batches", epoch, clipped)
        report.epochs.append(record)
        if on_epoch:
            on_epoch(record)

        if value > report.best_metric:
            report.best_metric, report.best_epoch = value, epoch
            best_state = copy.deepcopy(model.state_dict())
            best_opt = copy.deepcopy(optimizer.state_dict())
            bad_epochs = 0
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, config, epoch=epoch, selection=value,
                                seed=config.seed, optimizer=best_opt)
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                report.stopped_early = True
                break

    report.seconds = time.perf_counter() - t_start
    model.load_state_dict(best_state)
    model.eval()
    return model, report
