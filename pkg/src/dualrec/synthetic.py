"""Offline synthetic fixture: a learnable interaction log plus
cluster-structured semantic embeddings.

The catalog is split round-robin into clusters (item i joins cluster
i % clusters, matching the structured-embedding generator). Each cluster
owns a fixed ring ordering of its items; a user walks their cluster's
ring from a random offset, following the ring with high probability and
jumping to a random in-cluster position otherwise. Next-item behaviour is
therefore predictable from the last item, which a sequence model can
learn from the semantic vectors alone.

Catalog size must stay comfortably above 100 + max sequence length, since
evaluation samples 100 distinct negatives outside each user's history.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Interaction,
    SequenceDataset,
    SplitResult,
    build_dataset,
    leave_one_out_split,
)
from .semantics import (
    ItemAttributes,
    SemanticCache,
    SemanticMatrices,
    matrices_from_records,
    structured_fingerprint,
    synthesize_structured_embeddings,
)


@dataclass
class FixtureSpec:
    users: int = 200
    items: int = 150
    clusters: int = 2
    noise: float = 0.1
    d0: int = 48
    seed: int = 0
    min_len: int = 8
    max_len: int = 16
    follow_prob: float = 0.95

    def __post_init__(self):
        if self.items < 101 + self.max_len:
            raise ValueError(
                "catalog too small for 100 sampled negatives per evaluation instance"
            )

    def item_id(self, index: int) -> str:
        return f"item-{index:04d}"

    def user_id(self, index: int) -> str:
        return f"user-{index:04d}"


def generate_interactions(spec: FixtureSpec) -> list[Interaction]:
    rng = np.random.default_rng(spec.seed)
    rings: list[list[int]] = []
    for c in range(spec.clusters):
        members = [i for i in range(spec.items) if i % spec.clusters == c]
        rng.shuffle(members)
        rings.append(members)

    rows: list[Interaction] = []
    for u in range(spec.users):
        ring = rings[u % spec.clusters]
        pos = int(rng.integers(0, len(ring)))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        for t in range(length):
            rows.append(Interaction(spec.user_id(u), spec.item_id(ring[pos]), t))
            if rng.random() < spec.follow_prob:
                pos = (pos + 1) % len(ring)
            else:
                pos = int(rng.integers(0, len(ring)))
    return rows


def fixture_item_attributes(spec: FixtureSpec, index: int) -> ItemAttributes:
    return ItemAttributes(
        pairs=(
            ("name", spec.item_id(index)),
            ("group", f"cluster-{index % spec.clusters}"),
        ),
        image_path=f"images/{spec.item_id(index)}.png",
    )


def build_fixture(spec: FixtureSpec) -> tuple[SequenceDataset, SplitResult, SemanticMatrices]:
    """In-memory fixture: dataset, leave-one-out split with negatives, and
    the structured semantic matrices."""
    rows = generate_interactions(spec)
    dataset = build_dataset(rows, name="synthetic", max_len=spec.max_len)
    split = leave_one_out_split(dataset, np.random.default_rng(spec.seed))
    records = synthesize_structured_embeddings(
        dataset.item_ids, spec.clusters, spec.noise, spec.seed, spec.d0
    )
    matrices = matrices_from_records(records, dataset.item_ids, spec.d0)
    return dataset, split, matrices


def write_fixture_files(spec: FixtureSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write the raw interaction log and the item-attribute sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    interactions_path = out / "interactions.tsv"
    with open(interactions_path, "w", encoding="utf-8") as fh:
        fh.write("user\titem\ttimestamp\n")
        for r in generate_interactions(spec):
            fh.write(f"{r.user}\t{r.item}\t{r.timestamp}\n")

    items_path = out / "items.jsonl"
    with open(items_path, "w", encoding="utf-8") as fh:
        for index in range(spec.items):
            attrs = fixture_item_attributes(spec, index)
            fh.write(json.dumps({
                "item": spec.item_id(index),
                "attributes": [list(pair) for pair in attrs.pairs],
                "image": attrs.image_path,
            }) + "\n")
    return {"interactions": interactions_path, "items": items_path}


def populate_fixture_cache(
    spec: FixtureSpec,
    dataset: SequenceDataset,
    cache: SemanticCache,
) -> str:
    """Write structured embeddings for every dataset item into the cache;
    returns the provider fingerprint they are stored under."""
    fingerprint = structured_fingerprint(spec.clusters, spec.noise, spec.seed, spec.d0)
    records = synthesize_structured_embeddings(
        dataset.item_ids, spec.clusters, spec.noise, spec.seed, spec.d0
    )
    for record in records:
        cache.put(dataset.name, fingerprint, record)
    return fingerprint
