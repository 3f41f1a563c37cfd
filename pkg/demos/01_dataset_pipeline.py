"""Walk through the dataset stage: parse a raw log, filter it, build
chronological sequences, split leave-one-out, and read the statistics.

Run:  python3 demos/01_dataset_pipeline.py
"""

import tempfile
from pathlib import Path

import numpy as np

from dualrec.data import (
    apply_filters,
    build_dataset,
    dataset_stats,
    leave_one_out_split,
    load_interactions,
    long_tail_partition,
    train_popularity,
)
from dualrec.synthetic import FixtureSpec, write_fixture_files

workdir = Path(tempfile.mkdtemp(prefix="dualrec-demo-"))
print(f"working in {workdir}\n")

# generate a raw log shaped like a real export: user, item, timestamp rows
spec = FixtureSpec(users=60, items=130, clusters=2, noise=0.1, d0=16, seed=0)
files = write_fixture_files(spec, workdir)
print(f"raw log: {files['interactions']}")

rows = load_interactions(files["interactions"], "tsv")
print(f"parsed {len(rows)} interactions "
      f"({rows[0].user} -> {rows[0].item} at t={rows[0].timestamp}, ...)")

# cold-start filtering: drop items seen < 3 times, then users with < 5 rows
filtered = apply_filters(rows, min_user=5, min_item=3)
print(f"after (min_user=5, min_item=3) filtering: {len(filtered)} interactions")

dataset = build_dataset(filtered, name="demo", max_len=50)
stats = dataset_stats(dataset)
print(f"dataset: {stats['users']} users, {stats['items']} items, "
      f"avg sequence {stats['avg_seq_len']}, sparsity {stats['sparsity']:.2f}%\n")

split = leave_one_out_split(dataset, np.random.default_rng(0))
u0 = dataset.user_ids[0]
print(f"user {u0}: train prefix {split.train[0]}")
print(f"          validation target {split.valid[0].positive} "
      f"(prefix of {len(split.valid[0].prefix)})")
print(f"          test target {split.test[0].positive} "
      f"(prefix of {len(split.test[0].prefix)})")
print(f"          100 sampled negatives per instance, e.g. {split.test[0].negatives[:5]}...")

popularity = train_popularity(dataset, split)
head, tail = long_tail_partition(popularity)
print(f"\nlong-tail partition on training popularity: "
      f"{len(head)} head items, {len(tail)} tail items")
