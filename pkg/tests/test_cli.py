import json
from pathlib import Path

import numpy as np
import pytest

from dualrec.cli import main
from dualrec.semantics import SemanticCache
from dualrec.synthetic import FixtureSpec, write_fixture_files


@pytest.fixture()
def workdir(tmp_path):
    return tmp_path / "work"


def small_fixture_args(workdir, users=40, items=130, d0=12):
    return ["fixture", "--workdir", str(workdir), "--users", str(users),
            "--items", str(items), "--d0", str(d0), "--seed", "0"]


def write_train_cfg(path, **overrides):
    base = {
        "learning_rate": 0.003, "batch_size": 8, "max_epochs": 2, "patience": 2,
        "alpha": 0.1, "tau": 2.0, "seed": 0, "align_cap": 512, "grad_clip": 5.0,
        "d": 8, "backbone_layers": 1, "backbone_dropout": 0.0,
    }
    base.update(overrides)
    Path(path).write_text("\n".join(f"{k} = {v}" for k, v in base.items()) + "\n")
    return str(path)


def test_fixture_then_full_pipeline(workdir, tmp_path, capsys):
    assert main(small_fixture_args(workdir)) == 0
    out = capsys.readouterr().out
    assert "fixture dataset 'synthetic'" in out

    cfg = write_train_cfg(tmp_path / "train.cfg")
    assert main(["train", "--dataset", "synthetic", "--workdir", str(workdir),
                 "--config", cfg, "--backbone", "self_attention", "--run", "r1"]) == 0
    run_dir = workdir / "runs" / "r1"
    assert (run_dir / "checkpoint.ckpt").exists()
    assert (run_dir / "log.jsonl").exists()
    assert (run_dir / "manifest.json").exists()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    for artifact in manifest["artifacts"]:
        assert Path(artifact).exists()
    assert not (run_dir / ".lock").exists()

    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.ckpt"),
                 "--dataset", "synthetic", "--workdir", str(workdir),
                 "--split", "test", "--tail-report"]) == 0
    report_path = run_dir / "report_test.json"
    record = json.loads(report_path.read_text())
    assert record["split"] == "test"
    assert 0.0 <= record["hr"] <= 1.0
    assert record["tail"] is not None
    ranks = (run_dir / "ranks_test.tsv").read_text().splitlines()
    assert ranks[0] == "user\tpositive\trank"
    assert len(ranks) == record["count"] + 1

    out_dir = workdir / "tables"
    assert main(["report", "--inputs", str(report_path), "--out", str(out_dir)]) == 0
    table = (out_dir / "comparison.tsv").read_text().splitlines()
    assert len(table) == 2


def test_prepare_from_raw_files(workdir, tmp_path, capsys):
    spec = FixtureSpec(users=40, items=125, d0=8, seed=1)
    files = write_fixture_files(spec, tmp_path / "raw")
    assert main(["prepare", "--raw", str(files["interactions"]), "--name", "toy",
                 "--workdir", str(workdir), "--items", str(files["items"]),
                 "--min-user", "3", "--min-item", "0", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "prepared 'toy'" in out
    prepared = workdir / "datasets" / "toy"
    stats = json.loads((prepared / "stats.json").read_text())
    assert stats["stats"]["users"] == 40
    assert stats["min_user"] == 3

    # rerun over unchanged input reproduces byte-identical outputs
    before = {p.name: p.read_bytes() for p in prepared.iterdir() if p.suffix != ".json"}
    assert main(["prepare", "--raw", str(files["interactions"]), "--name", "toy",
                 "--workdir", str(workdir), "--items", str(files["items"]),
                 "--min-user", "3", "--min-item", "0", "--seed", "7"]) == 0
    after = {p.name: p.read_bytes() for p in prepared.iterdir() if p.suffix != ".json"}
    assert before == after


def test_embed_synthetic_counts_and_resume(workdir, tmp_path, capsys):
    spec = FixtureSpec(users=40, items=125, d0=8, seed=1)
    files = write_fixture_files(spec, tmp_path / "raw")
    main(["prepare", "--raw", str(files["interactions"]), "--name", "toy",
          "--workdir", str(workdir), "--items", str(files["items"])])
    capsys.readouterr()

    assert main(["embed", "--dataset", "toy", "--workdir", str(workdir),
                 "--provider", "synthetic", "--d0", "8", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    dataset_items = len((workdir / "datasets" / "toy" / "item_ids.txt").read_text().splitlines())
    for route in ("text_route", "visual_route", "hybrid_route", "original_text"):
        assert f"route {route}: wrote {dataset_items}, cached {dataset_items}/{dataset_items}" in out

    # resume writes nothing new
    assert main(["embed", "--dataset", "toy", "--workdir", str(workdir),
                 "--provider", "synthetic", "--d0", "8", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert f"wrote 0, cached {dataset_items}/{dataset_items}" in out


def test_embed_remote_failure_preserves_partial_cache(workdir, tmp_path, capsys, monkeypatch):
    spec = FixtureSpec(users=40, items=125, d0=8, seed=1)
    files = write_fixture_files(spec, tmp_path / "raw")
    main(["prepare", "--raw", str(files["interactions"]), "--name", "toy",
          "--workdir", str(workdir), "--items", str(files["items"])])

    calls = {"n": 0}

    def flaky_transport(url, payload, timeout, token):
        calls["n"] += 1
        if calls["n"] > 6:
            from dualrec.semantics import TransientProviderError
            raise TransientProviderError("simulated outage")
        if payload["task"] == "describe":
            return {"text": f"desc {calls['n']}"}
        return {"embedding": [0.1] * 8}

    import dualrec.semantics as sem
    monkeypatch.setattr(sem, "_default_transport", flaky_transport)

    code = main(["embed", "--dataset", "toy", "--workdir", str(workdir),
                 "--provider", "remote", "--d0", "8", "--retries", "2",
                 "--endpoint", "http://example.invalid/api"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    # the records written before the outage survive
    cache_root = workdir / "cache" / "toy"
    fingerprints = list(cache_root.iterdir())
    assert len(fingerprints) == 1
    surviving = list(fingerprints[0].rglob("*.vec"))
    assert len(surviving) >= 1


def test_eval_missing_checkpoint_names_path(workdir, capsys):
    code = main(["eval", "--checkpoint", str(workdir / "nope.ckpt"),
                 "--dataset", "synthetic", "--workdir", str(workdir)])
    assert code == 1
    err = capsys.readouterr().err
    assert "nope.ckpt" in err


def test_train_requires_prepared_dataset(workdir, capsys):
    code = main(["train", "--dataset", "ghost", "--workdir", str(workdir), "--run", "r"])
    assert code == 1
    assert "ghost" in capsys.readouterr().err


def test_run_lock_blocks_second_writer(workdir, tmp_path, capsys):
    main(small_fixture_args(workdir))
    cfg = write_train_cfg(tmp_path / "train.cfg")
    run_dir = workdir / "runs" / "locked"
    run_dir.mkdir(parents=True)
    (run_dir / ".lock").touch()
    code = main(["train", "--dataset", "synthetic", "--workdir", str(workdir),
                 "--config", cfg, "--run", "locked"])
    assert code == 1
    assert "locked" in capsys.readouterr().err


def test_report_ablation_table_and_alpha_series(workdir, tmp_path):
    # fabricate five ablation reports plus an alpha sweep
    reports = []
    for i, flags in enumerate([[], ["no_cl"], ["no_ca"], ["no_ori_view"], ["no_twp"]]):
        record = {
            "dataset": "synthetic", "backbone": "self_attention", "ablations": flags,
            "seed": 0, "alpha": 0.1, "split": "test", "k": 10,
            "hr": 0.5 - 0.05 * i, "ndcg": 0.3 - 0.02 * i, "count": 100,
            "undefined": False, "fingerprint": "x", "tail": None,
        }
        path = tmp_path / f"rep{i}.json"
        path.write_text(json.dumps(record))
        reports.append(str(path))
    out_dir = tmp_path / "tables"
    assert main(["report", "--inputs", *reports, "--out", str(out_dir)]) == 0
    rows = (out_dir / "comparison.tsv").read_text().splitlines()
    assert len(rows) == 6  # header + 5 ablation rows

    alpha_reports = []
    for i, alpha in enumerate([0.5, 0.01, 1.0, 0.05, 0.1]):
        record = {
            "dataset": "synthetic", "backbone": "self_attention", "ablations": [],
            "seed": 0, "alpha": alpha, "split": "test", "k": 10,
            "hr": 0.4, "ndcg": 0.2, "count": 100,
            "undefined": False, "fingerprint": "x", "tail": None,
        }
        path = tmp_path / f"alpha{i}.json"
        path.write_text(json.dumps(record))
        alpha_reports.append(str(path))
    out2 = tmp_path / "tables2"
    assert main(["report", "--inputs", *alpha_reports, "--out", str(out2)]) == 0
    series = (out2 / "alpha_series.tsv").read_text().splitlines()
    alphas = [float(line.split("\t")[0]) for line in series[1:]]
    assert alphas == sorted(alphas) == [0.01, 0.05, 0.1, 0.5, 1.0]


def test_embed_ten_items_forty_records(workdir, tmp_path, capsys):
    spec = FixtureSpec(users=40, items=125, d0=8, seed=2)
    files = write_fixture_files(spec, tmp_path / "raw")
    main(["prepare", "--raw", str(files["interactions"]), "--name", "small",
          "--workdir", str(workdir), "--items", str(files["items"])])
    capsys.readouterr()
    # keep only ten items' records by trimming the dataset? simpler: count records
    assert main(["embed", "--dataset", "small", "--workdir", str(workdir),
                 "--provider", "synthetic", "--d0", "8"]) == 0
    cache = SemanticCache(workdir / "cache")
    fp_dir = next((workdir / "cache" / "small").iterdir())
    total = sum(1 for _ in fp_dir.rglob("*.vec"))
    items = len((workdir / "datasets" / "small" / "item_ids.txt").read_text().splitlines())
    assert total == 4 * items
