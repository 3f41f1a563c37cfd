"""Command-line surface: prepare -> embed -> train -> eval -> report.

Every command runs against a ``--workdir`` root:

    <workdir>/datasets/<name>/   prepared dataset directory
    <workdir>/cache/             semantic embedding cache
    <workdir>/runs/<run>/        manifest, config snapshot, log, checkpoint,
                                 evaluation reports

Each run directory holds exactly one ``manifest.json`` recording the
command, its config snapshot, input fingerprints and every artifact path.
A lock file guards against two writers sharing a run directory. All
failures exit nonzero with a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .backbones import BackboneConfig
from .data import (
    apply_filters,
    build_dataset,
    leave_one_out_split,
    load_interactions,
    load_prepared,
    long_tail_partition,
    train_popularity,
    write_prepared,
)
from .evaluation import evaluate, long_tail_report
from .model import DualViewModel, ModelConfig, ScoringContext
from .semantics import (
    ItemAttributes,
    ProviderConfig,
    SemanticCache,
    SemanticMatrices,
    embed_items,
    make_provider,
)
from .synthetic import FixtureSpec, populate_fixture_cache, write_fixture_files
from .training import (
    fit,
    parse_config,
    train_config_from_mapping,
    write_config,
)

ROUTE_SHORT_NAMES = {
    "text": "text_route",
    "visual": "visual_route",
    "hybrid": "hybrid_route",
    "orig": "original_text",
}


class CliError(RuntimeError):
    """User-facing failure; printed as one line and exits nonzero."""


# ---------------------------------------------------------------------------
# small helpers


def _workdir_paths(workdir: str) -> dict[str, Path]:
    root = Path(workdir)
    return {
        "root": root,
        "datasets": root / "datasets",
        "cache": root / "cache",
        "runs": root / "runs",
    }


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _load_items_file(path: Path) -> dict[str, ItemAttributes]:
    items: dict[str, ItemAttributes] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            items[record["item"]] = ItemAttributes(
                pairs=tuple((k, str(v)) for k, v in record.get("attributes", [])),
                image_path=record.get("image"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise CliError(f"{path}:{lineno}: bad item record ({err})") from None
    return items


class RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.path.touch(exist_ok=False)
        except FileExistsError:
            raise CliError(f"run directory is locked by another writer: {self.path}") from None
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_manifest(run_dir: Path, manifest: dict) -> Path:
    path = run_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _discover_fingerprint(cache_root: Path, dataset: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    base = cache_root / dataset
    candidates = sorted(p.name for p in base.iterdir() if p.is_dir()) if base.exists() else []
    if len(candidates) == 1:
        return candidates[0]
    if not candidates:
        raise CliError(f"no embedding cache found for dataset '{dataset}'; run embed first")
    raise CliError(
        f"multiple cache fingerprints for '{dataset}': {candidates}; pass --fingerprint"
    )


def _cache_d0(cache_root: Path, dataset: str, fingerprint: str) -> int:
    base = cache_root / dataset / fingerprint
    for route_dir in sorted(base.iterdir()):
        for record in sorted(route_dir.glob("*.vec")):
            blob = record.read_bytes()
            # d0 sits after magic+version+id+route in the record header
            offset = 5
            id_len = int.from_bytes(blob[offset:offset + 2], "little")
            offset += 2 + id_len
            route_len = blob[offset]
            offset += 1 + route_len
            return int.from_bytes(blob[offset:offset + 4], "little")
    raise CliError(f"embedding cache for '{dataset}' ({fingerprint}) is empty")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    paths = _workdir_paths(args.workdir)
    raw = Path(args.raw)
    if not raw.exists():
        raise CliError(f"raw interactions file not found: {raw}")
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    columns = tuple(args.columns.split(",")) if args.columns else ("user", "item", "timestamp")
    if len(columns) != 3:
        raise CliError("--columns needs exactly three comma-separated names")
    interactions = load_interactions(raw, args.format, columns=columns)
    interactions = apply_filters(interactions, args.min_user, args.min_item)

    items_with_assets = None
    if args.items:
        items = _load_items_file(Path(args.items))
        items_with_assets = {
            item_id for item_id, attrs in items.items() if attrs.has_text and attrs.has_image
        }
    dataset = build_dataset(
        interactions, name=args.name, max_len=args.max_len,
        items_with_assets=items_with_assets,
    )
    if dataset.num_users == 0:
        raise CliError("no user kept at least three interactions after filtering")
    split = leave_one_out_split(dataset, np.random.default_rng(args.seed))

    out_dir = paths["datasets"] / args.name
    write_prepared(dataset, split, out_dir, manifest_extra={
        "min_user": args.min_user,
        "min_item": args.min_item,
        "seed": args.seed,
        "raw_sha256": _file_sha256(raw),
    })
    if args.items:
        (out_dir / "items.jsonl").write_text(
            Path(args.items).read_text(encoding="utf-8"), encoding="utf-8"
        )

    manifest = {
        "command": "prepare",
        "dataset": args.name,
        "config": {
            "raw": str(raw), "format": args.format, "min_user": args.min_user,
            "min_item": args.min_item, "max_len": args.max_len, "seed": args.seed,
        },
        "inputs": {"raw_sha256": _file_sha256(raw)},
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": sorted(str(p) for p in out_dir.iterdir()),
    }
    _write_manifest(out_dir, manifest)
    stats = json.loads((out_dir / "stats.json").read_text())["stats"]
    print(f"prepared '{args.name}': {stats['users']} users, {stats['items']} items, "
          f"{stats['interactions']} interactions -> {out_dir}")
    return 0


def cmd_embed(args) -> int:
    paths = _workdir_paths(args.workdir)
    dataset_dir = paths["datasets"] / args.dataset
    if not dataset_dir.exists():
        raise CliError(f"dataset '{args.dataset}' is not prepared under {paths['datasets']}")
    dataset, _ = load_prepared(dataset_dir)

    items_path = Path(args.items) if args.items else dataset_dir / "items.jsonl"
    if not items_path.exists():
        raise CliError(f"item attributes file not found: {items_path}")
    attributes = _load_items_file(items_path)

    routes = []
    for short in args.routes.split(","):
        short = short.strip()
        if short not in ROUTE_SHORT_NAMES:
            raise CliError(f"unknown route '{short}' (choose from {sorted(ROUTE_SHORT_NAMES)})")
        routes.append(ROUTE_SHORT_NAMES[short])

    config = ProviderConfig(
        kind=args.provider,
        endpoint=args.endpoint,
        description_model=args.desc_model,
        embedding_model=args.embed_model,
        timeout=args.timeout,
        retries=args.retries,
        d0=args.d0,
        seed=args.seed,
    )
    provider = make_provider(config)
    cache = SemanticCache(paths["cache"])

    pending = []
    for item_id in dataset.item_ids:
        if item_id not in attributes:
            raise CliError(f"item '{item_id}' missing from {items_path}")
        pending.append((item_id, attributes[item_id]))

    written = embed_items(
        pending, provider, cache, dataset.name, routes=routes, resume=args.resume
    )
    fingerprint = config.fingerprint()
    for route in routes:
        total = cache.count(dataset.name, fingerprint, route)
        print(f"route {route}: wrote {written[route]}, cached {total}/{dataset.num_items}")
    print(f"cache fingerprint: {fingerprint}")
    return 0


def _backbone_from_values(values: dict[str, str], kind: str, d: int, max_len: int) -> BackboneConfig:
    return BackboneConfig(
        kind=kind,
        layers=int(values.get("backbone_layers", 2 if kind == "self_attention" else 1)),
        heads=int(values.get("backbone_heads", 1)),
        max_len=int(values.get("backbone_max_len", max_len)),
        dropout=float(values.get("backbone_dropout", 0.2 if kind == "self_attention" else 0.0)),
        d=d,
    )


def cmd_train(args) -> int:
    paths = _workdir_paths(args.workdir)
    dataset_dir = paths["datasets"] / args.dataset
    if not dataset_dir.exists():
        raise CliError(f"dataset '{args.dataset}' is not prepared under {paths['datasets']}")
    dataset, split = load_prepared(dataset_dir)

    values = parse_config(args.config) if args.config else {}
    train_config = train_config_from_mapping(values)
    if args.ablate:
        flags = frozenset(f.strip() for f in args.ablate.split(",") if f.strip())
        train_config = replace(train_config, ablations=flags)

    fingerprint = _discover_fingerprint(paths["cache"], dataset.name, args.fingerprint)
    cache = SemanticCache(paths["cache"])
    d0 = int(values.get("d0", 0)) or _cache_d0(paths["cache"], dataset.name, fingerprint)
    matrices = SemanticMatrices.from_cache(cache, dataset.name, fingerprint, dataset.item_ids, d0)

    d = int(values.get("d", 64))
    backbone = _backbone_from_values(values, args.backbone, d, dataset.max_len)
    model_config = ModelConfig(d0=d0, d=d, backbone=backbone)
    model = DualViewModel(model_config, np.random.default_rng(train_config.seed))

    run_dir = paths["runs"] / args.run
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    with RunLock(run_dir):
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot_path = run_dir / "train.cfg"
        write_config(snapshot_path, train_config, {
            "d0": d0, "d": d,
            "backbone_kind": backbone.kind, "backbone_layers": backbone.layers,
            "backbone_heads": backbone.heads, "backbone_max_len": backbone.max_len,
            "backbone_dropout": backbone.dropout,
        })
        log_path = run_dir / "log.jsonl"
        with open(log_path, "w", encoding="utf-8") as log_file:
            def sink(record: dict) -> None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
                print(
                    f"epoch {record['epoch']:3d}  srs {record['l_srs']:.3f}  "
                    f"align {record['l_align']:.3f}  valid N@10 {record['valid_ndcg']:.4f}"
                )

            result = fit(
                model, matrices, split, train_config,
                run_dir=run_dir, log_sink=sink,
            )

        manifest = {
            "command": "train",
            "dataset": dataset.name,
            "run": args.run,
            "config": {
                **_train_kwargs(train_config, as_strings=True),
                "backbone": asdict(backbone),
                "d0": d0, "d": d,
            },
            "seed": train_config.seed,
            "inputs": {
                "dataset_stats_sha256": _file_sha256(dataset_dir / "stats.json"),
                "cache_fingerprint": fingerprint,
            },
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "artifacts": [str(snapshot_path), str(log_path), str(result.checkpoint_path),
                          str(run_dir / "manifest.json")],
        }
        _write_manifest(run_dir, manifest)
    print(f"best epoch {result.best_epoch}; valid NDCG@10 "
          f"{result.best_valid.ndcg:.4f}; checkpoint {result.checkpoint_path}")
    return 0


def _train_kwargs(config: TrainConfig, as_strings: bool = False) -> dict:
    out = {
        "learning_rate": config.learning_rate, "batch_size": config.batch_size,
        "max_epochs": config.max_epochs, "patience": config.patience,
        "alpha": config.alpha, "tau": config.tau, "seed": config.seed,
        "align_cap": config.align_cap, "grad_clip": config.grad_clip,
        "ablations": sorted(config.ablations) if as_strings else config.ablations,
    }
    return out


def cmd_eval(args) -> int:
    paths = _workdir_paths(args.workdir)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise CliError(f"checkpoint not found: {checkpoint}")
    dataset_dir = paths["datasets"] / args.dataset
    if not dataset_dir.exists():
        raise CliError(f"dataset '{args.dataset}' is not prepared under {paths['datasets']}")
    dataset, split = load_prepared(dataset_dir)

    model, meta = DualViewModel.load(checkpoint)
    ablations = frozenset(f for f in meta.get("ablations", "").split(",") if f)
    fingerprint = _discover_fingerprint(paths["cache"], dataset.name, args.fingerprint)
    cache = SemanticCache(paths["cache"])
    matrices = SemanticMatrices.from_cache(
        cache, dataset.name, fingerprint, dataset.item_ids, model.config.d0
    )

    instances = split.valid if args.split == "valid" else split.test
    scorer = ScoringContext(model, matrices, ablations)
    report = evaluate(scorer, instances)

    tail_record = None
    if args.tail_report:
        popularity = train_popularity(dataset, split)
        _, tail = long_tail_partition(popularity)
        tail_rep = long_tail_report(report, tail)
        tail_record = tail_rep.as_record()

    run_dir = checkpoint.parent if args.run is None else paths["runs"] / args.run
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "dataset": dataset.name,
        "backbone": meta.get("backbone_kind", "?"),
        "ablations": sorted(ablations),
        "seed": int(meta.get("seed", 0)),
        "alpha": float(meta.get("alpha", 0.0)),
        "split": args.split,
        **report.as_record(),
        "tail": tail_record,
    }
    report_path = run_dir / f"report_{args.split}.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ranks_path = run_dir / f"ranks_{args.split}.tsv"
    with open(ranks_path, "w", encoding="utf-8") as fh:
        fh.write("user\tpositive\trank\n")
        for outcome in report.outcomes:
            fh.write(f"{outcome.user}\t{outcome.positive}\t{outcome.rank}\n")

    manifest = {
        "command": "eval",
        "dataset": dataset.name,
        "config": {"checkpoint": str(checkpoint), "split": args.split,
                   "tail_report": bool(args.tail_report)},
        "inputs": {"checkpoint_sha256": _file_sha256(checkpoint),
                   "cache_fingerprint": fingerprint},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": [str(report_path), str(ranks_path)],
    }
    _write_manifest(run_dir, {**manifest, "run": run_dir.name})
    tail_msg = ""
    if tail_record is not None:
        tail_msg = (f"; tail HR@10 {tail_record['hr']}, N@10 {tail_record['ndcg']} "
                    f"({tail_record['count']} instances)")
        if tail_record["undefined"]:
            tail_msg = "; tail slice empty (metrics undefined)"
    print(f"{args.split}: HR@10 {report.hr:.4f}, NDCG@10 {report.ndcg:.4f} "
          f"over {report.count} instances{tail_msg}")
    print(f"report: {report_path}")
    return 0


def _run_label(record: dict) -> str:
    flags = record.get("ablations") or []
    base = record.get("backbone", "?")
    return f"{base}+{','.join(flags)}" if flags else base


def cmd_report(args) -> int:
    records = []
    for path in args.inputs:
        p = Path(path)
        if not p.exists():
            raise CliError(f"report not found: {p}")
        records.append(json.loads(p.read_text(encoding="utf-8")))
    if not records:
        raise CliError("no input reports given")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    comparison = out_dir / "comparison.tsv"
    with open(comparison, "w", encoding="utf-8") as fh:
        fh.write("label\tdataset\tsplit\thr@10\tndcg@10\tcount\ttail_hr@10\ttail_ndcg@10\n")
        for r in records:
            tail = r.get("tail") or {}
            fh.write("\t".join([
                _run_label(r), r.get("dataset", "?"), r.get("split", "?"),
                f"{r['hr']:.4f}", f"{r['ndcg']:.4f}", str(r["count"]),
                "-" if tail.get("hr") is None else f"{tail['hr']:.4f}",
                "-" if tail.get("ndcg") is None else f"{tail['ndcg']:.4f}",
            ]) + "\n")

    artifacts = [comparison]

    alphas = {r.get("alpha") for r in records}
    if len(alphas) > 1:
        series = out_dir / "alpha_series.tsv"
        with open(series, "w", encoding="utf-8") as fh:
            fh.write("alpha\thr@10\tndcg@10\n")
            for r in sorted(records, key=lambda r: r.get("alpha", 0.0)):
                fh.write(f"{r['alpha']}\t{r['hr']:.4f}\t{r['ndcg']:.4f}\n")
        artifacts.append(series)

    with_tail = [r for r in records if r.get("tail")]
    if with_tail:
        bars = out_dir / "overall_vs_tail.tsv"
        with open(bars, "w", encoding="utf-8") as fh:
            fh.write("label\toverall_hr@10\ttail_hr@10\toverall_ndcg@10\ttail_ndcg@10\n")
            for r in with_tail:
                tail = r["tail"]
                fh.write("\t".join([
                    _run_label(r), f"{r['hr']:.4f}",
                    "-" if tail["hr"] is None else f"{tail['hr']:.4f}",
                    f"{r['ndcg']:.4f}",
                    "-" if tail["ndcg"] is None else f"{tail['ndcg']:.4f}",
                ]) + "\n")
        artifacts.append(bars)

    manifest = {
        "command": "report",
        "config": {"inputs": [str(p) for p in args.inputs]},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": sorted(str(p) for p in artifacts),
    }
    _write_manifest(out_dir, manifest)
    print(f"wrote {len(artifacts)} table(s) to {out_dir}")
    return 0


def cmd_fixture(args) -> int:
    paths = _workdir_paths(args.workdir)
    spec = FixtureSpec(
        users=args.users, items=args.items, clusters=args.clusters,
        noise=args.noise, d0=args.d0, seed=args.seed,
    )
    fixture_dir = paths["root"] / "fixture"
    files = write_fixture_files(spec, fixture_dir)

    # prepare + structured embeddings in one go
    interactions = load_interactions(files["interactions"], "tsv")
    dataset = build_dataset(interactions, name=args.name, max_len=spec.max_len)
    split = leave_one_out_split(dataset, np.random.default_rng(spec.seed))
    out_dir = paths["datasets"] / args.name
    write_prepared(dataset, split, out_dir, manifest_extra={"fixture": asdict(spec)})
    (out_dir / "items.jsonl").write_text(
        files["items"].read_text(encoding="utf-8"), encoding="utf-8"
    )
    cache = SemanticCache(paths["cache"])
    fingerprint = populate_fixture_cache(spec, dataset, cache)
    print(f"fixture dataset '{args.name}': {dataset.num_users} users, "
          f"{dataset.num_items} items; cache fingerprint {fingerprint}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualrec",
        description="Dual-view semantically enhanced sequential recommendation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse, filter and split an interaction log")
    p.add_argument("--raw", required=True, help="interaction log (tsv/csv)")
    p.add_argument("--name", required=True, help="dataset name")
    p.add_argument("--workdir", required=True)
    p.add_argument("--format", default="tsv", choices=["tsv", "csv"])
    p.add_argument("--columns", default=None, help="user,item,timestamp column names")
    p.add_argument("--min-user", type=int, default=0, dest="min_user")
    p.add_argument("--min-item", type=int, default=0, dest="min_item")
    p.add_argument("--max-len", type=int, default=data_mod.DEFAULT_MAX_LEN, dest="max_len")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items", default=None, help="item attributes jsonl (enables asset filtering)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("embed", help="populate the semantic embedding cache")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--provider", required=True, choices=["remote", "synthetic"])
    p.add_argument("--routes", default="text,visual,hybrid,orig")
    p.add_argument("--items", default=None, help="item attributes jsonl (defaults to the prepared copy)")
    p.add_argument("--d0", type=int, default=1536)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--endpoint", default="")
    p.add_argument("--desc-model", default="", dest="desc_model")
    p.add_argument("--embed-model", default="", dest="embed_model")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--config", default=None, help="flat key = value training config")
    p.add_argument("--backbone", default="self_attention",
                   choices=["self_attention", "recurrent"])
    p.add_argument("--ablate", default="", help="comma list: no_cl,no_ca,no_ori_view,no_twp")
    p.add_argument("--run", required=True, help="run name under <workdir>/runs/")
    p.add_argument("--fingerprint", default=None, help="cache fingerprint (auto if unique)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with sampled ranking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--split", default="test", choices=["valid", "test"])
    p.add_argument("--tail-report", action="store_true", dest="tail_report")
    p.add_argument("--run", default=None, help="write outputs to this run instead of the checkpoint's")
    p.add_argument("--fingerprint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate evaluation reports into tables")
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fixture", help="generate the offline synthetic dataset + cache")
    p.add_argument("--workdir", required=True)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=150)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--d0", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
