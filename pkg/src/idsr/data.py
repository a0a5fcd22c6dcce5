"""MovieLens ingestion, sparse filtering, sequence windowing and splitting.

A prepared dataset directory holds::

    train.tsv / validation.tsv / test.tsv   user, input_1..input_W, target, timestamp
    genres.tsv                              item index followed by one 0/1 column per genre
    items.tsv / users.tsv                   contiguous index -> raw MovieLens id
    manifest.json                           counts, seed, checksums

All ids inside the split files are contiguous indices, not raw MovieLens ids.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMATS = ("ml100k", "ml1m")
DATASET_VERSION = 1

ML100K_GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
ML1M_GENRES = ML100K_GENRES[1:]

_DELIMITERS = {"ml100k": "\t", "ml1m": "::"}


class DataError(ValueError):
    """Raised for malformed input files or protocol violations."""


def _check_format(fmt: str) -> None:
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class InteractionLog:
    """Events in file order, with contiguous user and item indices.

    ``user_ids[k]`` / ``item_ids[k]`` give the raw id behind index ``k``;
    indices are assigned in ascending raw-id order.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @classmethod
    def from_raw(cls, user_raw, item_raw, ratings, timestamps) -> "InteractionLog":
        user_ids, users = np.unique(np.asarray(user_raw, dtype=np.int64), return_inverse=True)
        item_ids, items = np.unique(np.asarray(item_raw, dtype=np.int64), return_inverse=True)
        return cls(
            users=users.astype(np.int64),
            items=items.astype(np.int64),
            ratings=np.asarray(ratings, dtype=np.float64),
            timestamps=np.asarray(timestamps, dtype=np.int64),
            user_ids=user_ids,
            item_ids=item_ids,
        )

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def item_index(self) -> dict[int, int]:
        return {int(raw): k for k, raw in enumerate(self.item_ids)}

    def user_index(self) -> dict[int, int]:
        return {int(raw): k for k, raw in enumerate(self.user_ids)}

    def subset(self, mask: np.ndarray) -> "InteractionLog":
        """Keep the masked events and rebuild contiguous indices."""
        return InteractionLog.from_raw(
            self.user_ids[self.users[mask]],
            self.item_ids[self.items[mask]],
            self.ratings[mask],
            self.timestamps[mask],
        )


def parse_interactions(path, fmt: str) -> InteractionLog:
    """Read ``u.data`` (ml100k) or ``ratings.dat`` (ml1m) without filtering."""
    _check_format(fmt)
    path = Path(path)
    if not path.exists():
        raise DataError(f"ratings file not found: {path}")
    delim = _DELIMITERS[fmt]
    cols: list[list] = [[], [], [], []]
    with open(path, encoding="latin-1") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                raise DataError(f"{path}: line {lineno}: empty line")
            parts = line.split(delim)
            if len(parts) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                cols[0].append(int(parts[0]))
                cols[1].append(int(parts[1]))
                cols[2].append(float(parts[2]))
                cols[3].append(int(parts[3]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if not cols[0]:
        raise DataError(f"{path}: file is empty")
    return InteractionLog.from_raw(*cols)


def filter_sparse(log: InteractionLog, min_user: int = 5, min_item: int = 5) -> InteractionLog:
    """Drop users and items below the thresholds, repeating until nothing changes."""
    if min_user < 1 or min_item < 1:
        raise DataError("min_user and min_item must be >= 1")
    keep = np.ones(len(log), dtype=bool)
    while True:
        user_counts = np.bincount(log.users[keep], minlength=log.n_users)
        item_counts = np.bincount(log.items[keep], minlength=log.n_items)
        bad = keep & ((user_counts[log.users] < min_user) | (item_counts[log.items] < min_item))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise DataError("dataset empty after filtering")
    return log.subset(keep)


@dataclass(frozen=True)
class SequenceSample:
    user_id: int
    input_items: tuple[int, ...]
    target_item: int
    last_timestamp: int


@dataclass
class SequenceSet:
    """Column-oriented collection of ``SequenceSample`` rows.

    ``timestamps`` holds the timestamp of each sample's target event.
    """

    users: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    timestamps: np.ndarray

    @classmethod
    def empty(cls, window: int) -> "SequenceSet":
        return cls(
            np.zeros(0, np.int64), np.zeros((0, window), np.int64),
            np.zeros(0, np.int64), np.zeros(0, np.int64),
        )

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, k: int) -> SequenceSample:
        return SequenceSample(
            int(self.users[k]), tuple(int(x) for x in self.inputs[k]),
            int(self.targets[k]), int(self.timestamps[k]),
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def window(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "SequenceSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceSet(self.users[idx], self.inputs[idx], self.targets[idx], self.timestamps[idx])

    def items_seen(self) -> np.ndarray:
        return np.unique(np.concatenate([self.inputs.ravel(), self.targets]))


def build_sequences(log: InteractionLog, window: int = 9) -> SequenceSet:
    """Stride-1 windows over each user's time-ordered events.

    Timestamp ties keep file order. A user with ``n`` events yields
    ``max(0, n - window)`` samples.
    """
    if window < 1:
        raise DataError("window must be >= 1")
    order = np.lexsort((np.arange(len(log)), log.timestamps, log.users))
    users = log.users[order]
    items = log.items[order]
    stamps = log.timestamps[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(users)]])

    parts = []
    for s, e in zip(starts, ends):
        n = e - s - window
        if n <= 0:
            continue
        seq = items[s:e]
        inputs = np.lib.stride_tricks.sliding_window_view(seq[:-1], window)
        parts.append((np.full(n, users[s]), inputs, seq[window:], stamps[s + window:e]))
    if not parts:
        return SequenceSet.empty(window)
    return SequenceSet(
        np.concatenate([p[0] for p in parts]).astype(np.int64),
        np.concatenate([p[1] for p in parts]).astype(np.int64),
        np.concatenate([p[2] for p in parts]).astype(np.int64),
        np.concatenate([p[3] for p in parts]).astype(np.int64),
    )


@dataclass
class DatasetSplit:
    train: SequenceSet
    validation: SequenceSet
    test: SequenceSet
    manifest: dict = field(default_factory=dict)


def _share(n: int, ratio: float) -> int:
    # ceil with slack for float noise, so 10 * 0.2 -> 2 but 6 * 0.2 -> 2
    return int(math.ceil(n * ratio - 1e-9))


def split_dataset(samples: SequenceSet, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Temporal test cut, then a seeded random train/validation split.

    The most recent ``ratios[2]`` share of samples (by target timestamp)
    forms the test set; the rest is shuffled and divided ``ratios[0]:ratios[1]``.
    Test samples whose target never occurs in train are dropped.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(samples)
    order = np.argsort(samples.timestamps, kind="stable")
    n_test = _share(n, ratios[2])
    test_idx = np.sort(order[n - n_test:])
    rest = np.sort(order[: n - n_test])

    rng = np.random.default_rng(seed)
    perm = rng.permutation(rest)
    n_val = _share(len(rest), ratios[1] / (ratios[0] + ratios[1]))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])

    train = samples.take(train_idx)
    known = train.items_seen()
    keep = np.isin(samples.targets[test_idx], known)
    test = samples.take(test_idx[keep])
    validation = samples.take(val_idx)

    for name, part in (("train", train), ("validation", validation), ("test", test)):
        if len(part) == 0:
            raise DataError(f"{name} split is empty")
    manifest = {
        "seed": int(seed),
        "ratios": list(ratios),
        "samples": n,
        "train": len(train),
        "validation": len(validation),
        "test": len(test),
        "test_dropped_unseen_target": int((~keep).sum()),
    }
    return DatasetSplit(train, validation, test, manifest)


@dataclass
class GenreCatalog:
    genre_names: list[str]
    vectors: np.ndarray  # (n_items, G) uint8, row k belongs to item index k

    @property
    def n_genres(self) -> int:
        return len(self.genre_names)

    def mean_genres(self) -> float:
        return float(self.vectors.sum(axis=1).mean())


def load_genres(path, fmt: str, item_ids) -> GenreCatalog:
    """Binary genre vectors aligned to the contiguous item index.

    ``item_ids[k]`` is the raw id of item index ``k``.
    """
    _check_format(fmt)
    path = Path(path)
    if not path.exists():
        raise DataError(f"genre file not found: {path}")
    rows: dict[int, np.ndarray] = {}
    with open(path, encoding="latin-1") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if fmt == "ml100k":
                parts = line.split("|")
                flags = parts[-len(ML100K_GENRES):]
                if len(parts) < 5 + len(ML100K_GENRES) or any(x not in ("0", "1") for x in flags):
                    raise DataError(f"{path}: line {lineno}: expected {len(ML100K_GENRES)} 0/1 genre flags")
                rows[int(parts[0])] = np.array([int(x) for x in flags], dtype=np.uint8)
            else:
                parts = line.split("::")
                if len(parts) != 3:
                    raise DataError(f"{path}: line {lineno}: expected 3 '::'-separated fields")
                vec = np.zeros(len(ML1M_GENRES), dtype=np.uint8)
                for name in parts[2].split("|"):
                    if name not in ML1M_GENRES:
                        raise DataError(f"{path}: line {lineno}: unknown genre {name!r}")
                    vec[ML1M_GENRES.index(name)] = 1
                rows[int(parts[0])] = vec
    names = ML100K_GENRES if fmt == "ml100k" else ML1M_GENRES
    vectors = np.zeros((len(item_ids), len(names)), dtype=np.uint8)
    for k, raw in enumerate(item_ids):
        raw = int(raw)
        if raw not in rows:
            raise DataError(f"{path}: item {raw} missing from genre file")
        vectors[k] = rows[raw]
    return GenreCatalog(list(names), vectors)


# --- dataset directory ------------------------------------------------------


def _write_samples(path: Path, samples: SequenceSet) -> None:
    w = samples.window
    header = ["user"] + [f"input_{k + 1}" for k in range(w)] + ["target", "timestamp"]
    table = np.column_stack([samples.users, samples.inputs, samples.targets, samples.timestamps])
    with open(path, "w") as f:
        f.write("\t".join(header) + "\n")
        for row in table:
            f.write("\t".join(map(str, row)) + "\n")


def _read_samples(path: Path) -> SequenceSet:
    with open(path) as f:
        header = f.readline().rstrip("\n").split("\t")
        window = len(header) - 3
        table = np.loadtxt(f, dtype=np.int64, delimiter="\t", ndmin=2)
    if table.size == 0:
        return SequenceSet.empty(window)
    return SequenceSet(table[:, 0], table[:, 1:1 + window], table[:, -2], table[:, -1])


@dataclass
class PreparedDataset:
    split: DatasetSplit
    catalog: GenreCatalog
    item_ids: np.ndarray
    user_ids: np.ndarray
    manifest: dict

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


def default_genre_path(ratings_path, fmt: str) -> Path:
    ratings_path = Path(ratings_path)
    return ratings_path.with_name("u.item" if fmt == "ml100k" else "movies.dat")


def prepare_dataset(
    ratings_path,
    fmt: str,
    out_dir,
    seed: int = 0,
    genre_path=None,
    window: int = 9,
    min_user: int = 5,
    min_item: int = 5,
    ratios=(0.7, 0.1, 0.2),
) -> PreparedDataset:
    """parse -> filter -> window -> split -> genres, written to ``out_dir``."""
    _check_format(fmt)
    genre_path = Path(genre_path) if genre_path else default_genre_path(ratings_path, fmt)
    if not genre_path.exists():
        raise DataError(f"genre file not found: {genre_path}")
    raw = parse_interactions(ratings_path, fmt)
    log = filter_sparse(raw, min_user, min_item)
    samples = build_sequences(log, window)
    split = split_dataset(samples, ratios, seed)
    catalog = load_genres(genre_path, fmt, log.item_ids)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_samples(out / "train.tsv", split.train)
    _write_samples(out / "validation.tsv", split.validation)
    _write_samples(out / "test.tsv", split.test)
    with open(out / "genres.tsv", "w") as f:
        f.write("\t".join(["item"] + catalog.genre_names) + "\n")
        for k, vec in enumerate(catalog.vectors):
            f.write("\t".join([str(k)] + [str(int(x)) for x in vec]) + "\n")
    for name, ids in (("items.tsv", log.item_ids), ("users.tsv", log.user_ids)):
        with open(out / name, "w") as f:
            f.write("index\traw_id\n")
            for k, raw_id in enumerate(ids):
                f.write(f"{k}\t{raw_id}\n")

    outputs = ["train.tsv", "validation.tsv", "test.tsv", "genres.tsv", "items.tsv", "users.tsv"]
    manifest = {
        "version": DATASET_VERSION,
        "format": fmt,
        "window": window,
        "min_user": min_user,
        "min_item": min_item,
        "raw": {"events": len(raw), "users": raw.n_users, "items": raw.n_items},
        "filtered": {"events": len(log), "users": log.n_users, "items": log.n_items},
        "genres": {"count": catalog.n_genres, "mean_per_item": catalog.mean_genres()},
        "split": split.manifest,
        "sources": {
            str(Path(ratings_path).name): file_checksum(ratings_path),
            str(genre_path.name): file_checksum(genre_path),
        },
        "outputs": {name: file_checksum(out / name) for name in outputs},
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return PreparedDataset(split, catalog, log.item_ids, log.user_ids, manifest)


def load_dataset(path) -> PreparedDataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise DataError(f"{path} is not a prepared dataset (manifest.json missing)")
    manifest = json.loads((path / "manifest.json").read_text())
    split = DatasetSplit(
        _read_samples(path / "train.tsv"),
        _read_samples(path / "validation.tsv"),
        _read_samples(path / "test.tsv"),
        manifest.get("split", {}),
    )
    with open(path / "genres.tsv") as f:
        names = f.readline().rstrip("\n").split("\t")[1:]
        table = np.loadtxt(f, dtype=np.int64, delimiter="\t", ndmin=2)
    catalog = GenreCatalog(names, table[:, 1:].astype(np.uint8))
    item_ids = np.loadtxt(path / "items.tsv", dtype=np.int64, delimiter="\t", skiprows=1, ndmin=2)[:, 1]
    user_ids = np.loadtxt(path / "users.tsv", dtype=np.int64, delimiter="\t", skiprows=1, ndmin=2)[:, 1]
    return PreparedDataset(split, catalog, item_ids, user_ids, manifest)
