import json

import pytest

from gridloc.cli import main

TINY_CONFIG = {
    "synth": {
        "maps": 2,
        "scenes_per_map": 4,
        "samples_per_scene": 10,
        "step_len": 1.0,
        "world_extent": 30.0,
        "points_per_scan": 48,
        "sensor_range": 12.0,
        "cell_size": 2.0,
        "seed": 31,
    },
    "model": {"point_widths": [3, 8, 16], "seed": 1},
    "train": {"epochs": 2, "batch_size": 16, "decimation_k": 4, "seed": 2},
}


def write_config(tmp_path, extra=None):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    if extra:
        cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out.strip()
    return code, json.loads(out.splitlines()[-1]) if out else None


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full gen -> train -> index -> eval chain, shared by the tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root)
    data, trained, indexed, evaled = (root / n for n in ("data", "train", "index", "eval"))
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == 0
    assert main([
        "train", "--config", str(cfg), "--manifest", str(data / "manifest.json"),
        "--out", str(trained), "--emb-size", "8",
    ]) == 0
    assert main([
        "index", "--manifest", str(data / "manifest.json"),
        "--checkpoint", str(trained / "checkpoint.lnck"), "--out", str(indexed),
    ]) == 0
    assert main([
        "eval", "--manifest", str(data / "manifest.json"),
        "--checkpoint", str(trained / "checkpoint.lnck"),
        "--db", str(indexed / "db.emdb"),
        "--label-map", str(indexed / "label_map.txt"),
        "--out", str(evaled),
    ]) == 0
    return root, cfg, data, trained, indexed, evaled


def test_gen_outputs_exist(pipeline):
    _, _, data, *_ = pipeline
    for name in ("manifest.json", "clouds.pcc", "stats.json", "run_config.json"):
        assert (data / name).exists()


def test_gen_is_idempotent(pipeline, tmp_path):
    root, cfg, data, *_ = pipeline
    again = tmp_path / "data2"
    assert main(["gen", "--config", str(cfg), "--out", str(again)]) == 0
    for name in ("manifest.json", "clouds.pcc", "stats.json"):
        assert (again / name).read_bytes() == (data / name).read_bytes()


def test_stats_file_schema(pipeline):
    _, _, data, *_ = pipeline
    stats = json.loads((data / "stats.json").read_text())
    per_map = stats["per_map"]
    assert len(per_map) == TINY_CONFIG["synth"]["maps"]
    for row in per_map.values():
        assert row["n_val_kept"] <= row["n_val"]
        assert row["c_db"] >= 1
        assert row["c_q_val"] <= row["n_val"]
    assert stats["num_classes"] >= max(row["c_db"] for row in per_map.values())


def test_train_outputs(pipeline):
    _, _, _, trained, *_ = pipeline
    assert (trained / "checkpoint.lnck").exists()
    log_lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == TINY_CONFIG["train"]["epochs"]
    assert (trained / "run_config.json").exists()


def test_eval_report_schema(pipeline):
    *_, evaled = pipeline
    report = json.loads((evaled / "report.json").read_text())
    assert {"config", "per_map", "MAR@1", "MAR@1pct"} <= set(report)
    assert 0.0 <= report["MAR@1"] <= 1.0
    assert report["MAR@1"] <= report["MAR@1pct"] + 1e-12


def test_eval_radius_monotone_same_checkpoint(pipeline, tmp_path):
    root, cfg, data, trained, indexed, evaled = pipeline
    tight = tmp_path / "eval_tight"
    assert main([
        "eval", "--manifest", str(data / "manifest.json"),
        "--checkpoint", str(trained / "checkpoint.lnck"),
        "--db", str(indexed / "db.emdb"),
        "--label-map", str(indexed / "label_map.txt"),
        "--out", str(tight), "--radius", "2.0",
    ]) == 0
    loose = json.loads((evaled / "report.json").read_text())
    strict = json.loads((tight / "report.json").read_text())
    assert strict["MAR@1"] <= loose["MAR@1"]
    assert strict["MAR@1pct"] <= loose["MAR@1pct"]


def test_missing_artifact_errors_name_producer(tmp_path, capsys):
    code = main(["train", "--manifest", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "out")])
    assert code == 1
    err = capsys.readouterr().err
    assert "gridloc gen" in err


def test_bad_config_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["gen", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert "invalid JSON" in err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"synth": {"bogus_knob": 3}}))
    code = main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "bogus_knob" in capsys.readouterr().err


def test_bad_flag_usage_is_validation_error(capsys):
    assert main(["gen"]) == 1  # --out missing
    assert main(["definitely-not-a-command"]) == 1


def test_summary_lines_are_json(pipeline, capsys, tmp_path):
    root, cfg, data, trained, indexed, evaled = pipeline
    code, summary = run(
        capsys, "eval",
        "--manifest", str(data / "manifest.json"),
        "--checkpoint", str(trained / "checkpoint.lnck"),
        "--db", str(indexed / "db.emdb"),
        "--label-map", str(indexed / "label_map.txt"),
        "--out", str(tmp_path / "ev"),
    )
    assert code == 0
    assert summary["command"] == "eval"
    assert "mar_at_1" in summary


def test_holdout_gen_writes_manifest_pair(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "ho"
    assert main(["gen", "--config", str(cfg), "--out", str(out),
                 "--holdout-map", "1", "--k-percent", "75"]) == 0
    train_doc = json.loads((out / "manifest_holdout_train.json").read_text())
    held_doc = json.loads((out / "manifest_holdout_eval.json").read_text())
    assert {s["map_id"] for s in train_doc["samples"]} == {0}
    assert {s["map_id"] for s in held_doc["samples"]} == {1}
    held_roles = {s["role"] for s in held_doc["samples"]}
    assert held_roles <= {"database", "query", "excluded"}
    assert "database" in held_roles and ("query" in held_roles or "excluded" in held_roles)
    full_doc = json.loads((out / "manifest.json").read_text())
    assert len(train_doc["samples"]) + len(held_doc["samples"]) == len(full_doc["samples"])


def test_holdout_pipeline_runs_end_to_end(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "ho2"
    assert main(["gen", "--config", str(cfg), "--out", str(out),
                 "--holdout-map", "0", "--k-percent", "75"]) == 0
    trained = tmp_path / "ho_train"
    assert main(["train", "--config", str(cfg),
                 "--manifest", str(out / "manifest_holdout_train.json"),
                 "--out", str(trained), "--emb-size", "8", "--epochs", "1"]) == 0
    indexed = tmp_path / "ho_index"
    assert main(["index", "--manifest", str(out / "manifest_holdout_eval.json"),
                 "--checkpoint", str(trained / "checkpoint.lnck"),
                 "--out", str(indexed)]) == 0
    evaled = tmp_path / "ho_eval"
    assert main(["eval", "--manifest", str(out / "manifest_holdout_eval.json"),
                 "--checkpoint", str(trained / "checkpoint.lnck"),
                 "--db", str(indexed / "db.emdb"),
                 "--label-map", str(indexed / "label_map.txt"),
                 "--out", str(evaled)]) == 0
    report = json.loads((evaled / "report.json").read_text())
    assert list(report["per_map"].keys()) == ["0"]


def test_sweep_csv_schema(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = tmp_path / "data"
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == 0
    out = tmp_path / "sweep"
    code, summary = run(
        capsys, "sweep", "--manifest", str(data / "manifest.json"),
        "--config", str(cfg), "--out", str(out),
        "--emb-sizes", "4,8", "--decimations", "4", "--norms", "off,on",
        "--epochs", "1",
    )
    assert code == 0
    assert summary["runs"] == 4
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 5  # header + 4 rows
    header = lines[0].split(",")
    assert header[:3] == ["emb_size", "decimation", "norm"]
    assert any(c.startswith("recall@1_map") for c in header)
    assert any(c.startswith("recall@1pct_map") for c in header)
    assert "epoch_time_s" in header and "param_count" in header
    combos = {tuple(line.split(",")[:3]) for line in lines[1:]}
    assert combos == {("4", "4", "off"), ("4", "4", "on"),
                      ("8", "4", "off"), ("8", "4", "on")}
