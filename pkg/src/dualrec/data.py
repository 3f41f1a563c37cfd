"""Interaction-log ingestion, filtering, sequence building and splitting.

The pipeline is: parse a TSV/CSV log into :class:`Interaction` rows, drop
exact duplicates, apply the count filters (items first, then users, one
pass each), group per user in chronological order with ties broken by
original file order, left-truncate to ``max_len``, and keep users with at
least three interactions so the leave-one-out split always has a train
prefix, a validation target and a test target.

Built datasets are immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MIN_SEQUENCE_LEN = 3
DEFAULT_MAX_LEN = 200
DEFAULT_EVAL_NEGATIVES = 100


class DataFormatError(ValueError):
    """A raw input row could not be parsed; message carries the line number."""


class InsufficientCandidatesError(RuntimeError):
    """Catalog minus user history is smaller than the requested sample."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int


@dataclass(frozen=True)
class EvalInstance:
    """One leave-one-out ranking case: prefix, target and fixed negatives."""

    user: int
    prefix: tuple[int, ...]
    positive: int
    negatives: tuple[int, ...]


@dataclass
class SplitResult:
    train: list[list[int]]                 # per dense user id, may be shorter than 2
    valid: list[EvalInstance]
    test: list[EvalInstance]
    skipped_short: int = 0                 # sequences below the minimum length


@dataclass
class SequenceDataset:
    """Dense-id view of the interaction log plus per-item popularity."""

    name: str
    user_ids: list[str]                    # dense -> original
    item_ids: list[str]
    sequences: list[list[int]]             # dense user -> chronological dense items
    max_len: int = DEFAULT_MAX_LEN
    dropped_users: int = 0                 # users below the minimum length
    dropped_no_assets: int = 0             # interactions on items without semantics
    user_index: dict[str, int] = field(default_factory=dict)
    item_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        if not self.item_index:
            self.item_index = {v: i for i, v in enumerate(self.item_ids)}

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def popularity(self) -> np.ndarray:
        counts = np.zeros(self.num_items, dtype=np.int64)
        for seq in self.sequences:
            for item in seq:
                counts[item] += 1
        return counts


# ---------------------------------------------------------------------------
# parsing


def load_interactions(
    path: str | Path,
    format_tag: str = "tsv",
    columns: Sequence[str] = ("user", "item", "timestamp"),
) -> list[Interaction]:
    """Parse a delimited interaction log.

    A header is recognised when the first line contains all three
    configured column names; otherwise fields are read positionally as
    (user, item, timestamp). Exact duplicate rows are dropped keeping the
    first occurrence, which also fixes the order of equal timestamps.
    """
    if format_tag not in ("tsv", "csv"):
        raise ValueError(f"unknown format_tag '{format_tag}' (expected tsv or csv)")
    sep = "\t" if format_tag == "tsv" else ","
    path = Path(path)
    rows: list[Interaction] = []
    seen: set[tuple[str, str, int]] = set()

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    order = [0, 1, 2]
    start = 0
    if lines:
        first = [f.strip() for f in lines[0].split(sep)]
        if set(columns).issubset(set(first)):
            order = [first.index(c) for c in columns]
            start = 1

    for lineno in range(start, len(lines)):
        line = lines[lineno]
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(sep)]
        if len(fields) <= max(order):
            raise DataFormatError(
                f"line {lineno + 1}: expected at least {max(order) + 1} fields, got {len(fields)}"
            )
        user, item, raw_ts = fields[order[0]], fields[order[1]], fields[order[2]]
        try:
            ts = int(raw_ts)
        except ValueError:
            raise DataFormatError(f"line {lineno + 1}: bad timestamp '{raw_ts}'") from None
        if ts < 0:
            raise DataFormatError(f"line {lineno + 1}: negative timestamp {ts}")
        key = (user, item, ts)
        if key in seen:
            continue
        seen.add(key)
        rows.append(Interaction(user, item, ts))
    return rows


def apply_filters(
    interactions: Sequence[Interaction],
    min_user: int = 0,
    min_item: int = 0,
) -> list[Interaction]:
    """Drop rare items, then rare users; one pass each, order preserved."""
    if min_user < 0 or min_item < 0:
        raise ValueError("filter thresholds must be non-negative")
    rows = list(interactions)
    if min_item > 0:
        item_counts = Counter(r.item for r in rows)
        rows = [r for r in rows if item_counts[r.item] >= min_item]
    if min_user > 0:
        user_counts = Counter(r.user for r in rows)
        rows = [r for r in rows if user_counts[r.user] >= min_user]
    return rows


# ---------------------------------------------------------------------------
# dataset construction


def build_dataset(
    interactions: Sequence[Interaction],
    name: str = "dataset",
    max_len: int = DEFAULT_MAX_LEN,
    items_with_assets: set[str] | None = None,
) -> SequenceDataset:
    """Group interactions into per-user chronological item sequences.

    ``items_with_assets``, when given, whitelists items that have the full
    semantic inputs (attribute text and an image); interactions on other
    items are dropped before sequences are formed. Sequences keep their
    most recent ``max_len`` items and users with fewer than three
    interactions are excluded.
    """
    rows = list(interactions)
    dropped_no_assets = 0
    if items_with_assets is not None:
        kept = [r for r in rows if r.item in items_with_assets]
        dropped_no_assets = len(rows) - len(kept)
        rows = kept

    # stable sort: ties in timestamp keep original file order
    rows.sort(key=lambda r: r.timestamp)

    per_user: dict[str, list[str]] = {}
    for r in rows:
        per_user.setdefault(r.user, []).append(r.item)

    user_ids: list[str] = []
    sequences_raw: list[list[str]] = []
    dropped_users = 0
    for user, items in per_user.items():
        items = items[-max_len:]
        if len(items) < MIN_SEQUENCE_LEN:
            dropped_users += 1
            continue
        user_ids.append(user)
        sequences_raw.append(items)

    item_ids: list[str] = []
    item_index: dict[str, int] = {}
    for items in sequences_raw:
        for item in items:
            if item not in item_index:
                item_index[item] = len(item_ids)
                item_ids.append(item)

    sequences = [[item_index[v] for v in items] for items in sequences_raw]
    return SequenceDataset(
        name=name,
        user_ids=user_ids,
        item_ids=item_ids,
        sequences=sequences,
        max_len=max_len,
        dropped_users=dropped_users,
        dropped_no_assets=dropped_no_assets,
    )


# ---------------------------------------------------------------------------
# splitting and sampling


def sample_negatives(
    num_items: int,
    history: Iterable[int],
    n: int,
    rng: np.random.Generator,
    user: str | int = "?",
) -> list[int]:
    """Draw ``n`` distinct items uniformly from the catalog minus ``history``."""
    history_arr = np.fromiter(set(history), dtype=np.int64) if history else np.empty(0, np.int64)
    pool = np.setdiff1d(np.arange(num_items, dtype=np.int64), history_arr, assume_unique=False)
    if pool.size < n:
        raise InsufficientCandidatesError(
            f"user {user}: only {pool.size} candidates available, need {n}"
        )
    return [int(x) for x in rng.choice(pool, size=n, replace=False)]


def leave_one_out_split(
    dataset: SequenceDataset,
    rng: np.random.Generator | None = None,
    n_negatives: int = DEFAULT_EVAL_NEGATIVES,
) -> SplitResult:
    """Last item becomes the test target, the penultimate the validation
    target, everything before them the training prefix.

    Negatives for both evaluation splits are sampled here, once, so every
    model variant ranks against identical candidate sets. Pass a seeded
    ``rng`` for reproducibility.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    train: list[list[int]] = []
    valid: list[EvalInstance] = []
    test: list[EvalInstance] = []
    skipped = 0
    for user, seq in enumerate(dataset.sequences):
        if len(seq) < MIN_SEQUENCE_LEN:
            skipped += 1
            train.append(list(seq))
            continue
        history = set(seq)
        train_seq = seq[:-2]
        valid_prefix = tuple(seq[:-2])
        test_prefix = tuple(seq[:-1])
        valid_negs = sample_negatives(
            dataset.num_items, history, n_negatives, rng, user=dataset.user_ids[user]
        )
        test_negs = sample_negatives(
            dataset.num_items, history, n_negatives, rng, user=dataset.user_ids[user]
        )
        train.append(list(train_seq))
        valid.append(EvalInstance(user, valid_prefix, seq[-2], tuple(valid_negs)))
        test.append(EvalInstance(user, test_prefix, seq[-1], tuple(test_negs)))
    return SplitResult(train=train, valid=valid, test=test, skipped_short=skipped)


def train_popularity(dataset: SequenceDataset, split: SplitResult) -> np.ndarray:
    """Item popularity counted on the training prefixes only."""
    counts = np.zeros(dataset.num_items, dtype=np.int64)
    for seq in split.train:
        for item in seq:
            counts[item] += 1
    return counts


def long_tail_partition(
    popularity: np.ndarray,
    head_fraction: float = 0.2,
) -> tuple[set[int], set[int]]:
    """Split items into popular head and long tail by training popularity.

    Items are ordered by descending count with ties broken by ascending
    dense id; the first ceil(head_fraction * |V|) form the head.
    """
    num_items = len(popularity)
    ids = np.arange(num_items)
    order = np.lexsort((ids, -np.asarray(popularity)))
    head_n = int(math.ceil(head_fraction * num_items))
    head = set(int(i) for i in order[:head_n])
    tail = set(int(i) for i in order[head_n:])
    return head, tail


# ---------------------------------------------------------------------------
# statistics


def summarize_counts(users: int, items: int, interactions: int) -> dict:
    """Derived dataset statistics: average sequence length and sparsity (%)."""
    avg = interactions / users if users else 0.0
    sparsity = (1.0 - interactions / (users * items)) * 100.0 if users and items else 0.0
    return {
        "users": users,
        "items": items,
        "interactions": interactions,
        "avg_seq_len": round(avg, 2),
        "sparsity": round(sparsity, 2),
    }


def dataset_stats(dataset: SequenceDataset) -> dict:
    return summarize_counts(dataset.num_users, dataset.num_items, dataset.num_interactions)


# ---------------------------------------------------------------------------
# prepared-dataset directory


def write_prepared(
    dataset: SequenceDataset,
    split: SplitResult,
    out_dir: str | Path,
    manifest_extra: Mapping | None = None,
) -> None:
    """Persist id maps, sequences, eval negatives and the stats manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "user_ids.txt", "w", encoding="utf-8") as fh:
        for dense, original in enumerate(dataset.user_ids):
            fh.write(f"{dense}\t{original}\n")
    with open(out / "item_ids.txt", "w", encoding="utf-8") as fh:
        for dense, original in enumerate(dataset.item_ids):
            fh.write(f"{dense}\t{original}\n")
    with open(out / "sequences.txt", "w", encoding="utf-8") as fh:
        for user, seq in enumerate(dataset.sequences):
            fh.write(" ".join([str(user)] + [str(v) for v in seq]) + "\n")
    for split_name, instances in (("valid", split.valid), ("test", split.test)):
        with open(out / f"negatives_{split_name}.txt", "w", encoding="utf-8") as fh:
            for inst in instances:
                fh.write(" ".join([str(inst.user)] + [str(v) for v in inst.negatives]) + "\n")

    stats = dataset_stats(dataset)
    stats["sparsity_display"] = f"{stats['sparsity']:.2f}%"
    manifest = {
        "name": dataset.name,
        "max_len": dataset.max_len,
        "dropped_users": dataset.dropped_users,
        "dropped_no_assets": dataset.dropped_no_assets,
        "skipped_short": split.skipped_short,
        "stats": stats,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_prepared(directory: str | Path) -> tuple[SequenceDataset, SplitResult]:
    """Rebuild the dataset and split from a prepared directory."""
    directory = Path(directory)
    with open(directory / "stats.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    def read_ids(path: Path) -> list[str]:
        ids: list[str] = []
        for line in path.read_text(encoding="utf-8").splitlines():
            dense, original = line.split("\t", 1)
            assert int(dense) == len(ids)
            ids.append(original)
        return ids

    user_ids = read_ids(directory / "user_ids.txt")
    item_ids = read_ids(directory / "item_ids.txt")
    sequences: list[list[int]] = [[] for _ in user_ids]
    for line in (directory / "sequences.txt").read_text(encoding="utf-8").splitlines():
        parts = [int(x) for x in line.split()]
        sequences[parts[0]] = parts[1:]

    dataset = SequenceDataset(
        name=manifest["name"],
        user_ids=user_ids,
        item_ids=item_ids,
        sequences=sequences,
        max_len=manifest.get("max_len", DEFAULT_MAX_LEN),
        dropped_users=manifest.get("dropped_users", 0),
        dropped_no_assets=manifest.get("dropped_no_assets", 0),
    )

    negatives: dict[str, dict[int, tuple[int, ...]]] = {}
    for split_name in ("valid", "test"):
        table: dict[int, tuple[int, ...]] = {}
        for line in (directory / f"negatives_{split_name}.txt").read_text(encoding="utf-8").splitlines():
            parts = [int(x) for x in line.split()]
            table[parts[0]] = tuple(parts[1:])
        negatives[split_name] = table

    train: list[list[int]] = []
    valid: list[EvalInstance] = []
    test: list[EvalInstance] = []
    for user, seq in enumerate(dataset.sequences):
        train.append(list(seq[:-2]))
        valid.append(EvalInstance(user, tuple(seq[:-2]), seq[-2], negatives["valid"][user]))
        test.append(EvalInstance(user, tuple(seq[:-1]), seq[-1], negatives["test"][user]))
    return dataset, SplitResult(
        train=train, valid=valid, test=test, skipped_short=manifest.get("skipped_short", 0)
    )
