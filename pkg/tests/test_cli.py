import json
import os

import numpy as np
import pytest

from raven.cli import load_dataset_dir, load_model_dir, main

TINY_SPEC = {"train_count": 40, "valid_count": 12, "test_count": 12, "seed": 9}
TINY_TRAIN = {
    "model": {"visual_hidden": 4, "acoustic_hidden": 4, "encoder_hidden": 6, "shift_cap": 1.0, "seed": 4},
    "train": {"epochs": 1, "learning_rate": 0.01, "batch_size": 8, "seed": 4},
}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    spec = _write(root / "spec.json", TINY_SPEC)
    out = root / "data"
    assert main(["gen-data", "--config", spec, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset_dir):
    root = tmp_path_factory.mktemp("cli-run")
    cfg = _write(root / "train.json", TINY_TRAIN)
    out = root / "run"
    assert main(["train", "--config", cfg, "--data", str(dataset_dir), "--out", str(out)]) == 0
    return out


def test_gen_data_writes_expected_artifacts(dataset_dir):
    names = {p.name for p in dataset_dir.iterdir()}
    assert {"train.jsonl", "valid.jsonl", "test.jsonl", "embeddings.txt", "dataset.json", "manifest.json"} <= names
    splits, meta = load_dataset_dir(dataset_dir)
    assert [len(splits[s]) for s in ("train", "valid", "test")] == [40, 12, 12]
    assert meta["counts"]["train"] == 40


def test_gen_data_deterministic_bytes(tmp_path, dataset_dir):
    spec = _write(tmp_path / "spec.json", TINY_SPEC)
    out = tmp_path / "data2"
    assert main(["gen-data", "--config", spec, "--out", str(out)]) == 0
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "embeddings.txt", "dataset.json"):
        assert (out / name).read_bytes() == (dataset_dir / name).read_bytes(), name


def test_gen_data_rejects_zero_snr(tmp_path):
    spec = _write(tmp_path / "spec.json", {**TINY_SPEC, "snr": 0.0})
    assert main(["gen-data", "--config", spec, "--out", str(tmp_path / "d")]) == 1


def test_gen_data_rejects_unknown_keys(tmp_path):
    spec = _write(tmp_path / "spec.json", {**TINY_SPEC, "snrr": 2.0})
    code = main(["gen-data", "--config", spec, "--out", str(tmp_path / "d")])
    assert code == 1


def test_gen_data_invalid_spec_leaves_no_partial_outputs(tmp_path):
    spec = _write(tmp_path / "spec.json", {**TINY_SPEC, "snr": -1})
    out = tmp_path / "d"
    assert main(["gen-data", "--config", spec, "--out", str(out)]) == 1
    assert not out.exists() or not any(out.iterdir())


def test_train_writes_artifacts_and_manifest(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"checkpoint.bin", "model_config.json", "epochs.jsonl", "metrics.json", "manifest.json", "training_curve.png"} <= names
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "started_at" in manifest and "finished_at" in manifest
    assert set(manifest["artifacts"]) >= {"checkpoint.bin", "epochs.jsonl", "metrics.json"}
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert "test" in metrics and "valid" in metrics
    for line in (run_dir / "epochs.jsonl").read_text().splitlines():
        entry = json.loads(line)
        assert {"epoch", "split", "loss"} <= set(entry)


def test_train_determinism_byte_identical(tmp_path, dataset_dir):
    cfg = _write(tmp_path / "train.json", TINY_TRAIN)
    outs = []
    for tag in ("r1", "r2"):
        out = tmp_path / tag
        assert main(["train", "--config", cfg, "--data", str(dataset_dir), "--out", str(out)]) == 0
        outs.append(out)
    for name in ("checkpoint.bin", "epochs.jsonl", "metrics.json", "model_config.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_train_seed_flag_overrides_both_seeds(tmp_path, dataset_dir):
    cfg = _write(tmp_path / "train.json", TINY_TRAIN)
    out = tmp_path / "seeded"
    assert main(["train", "--config", cfg, "--data", str(dataset_dir), "--out", str(out), "--seed", "123"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["seed"] == 123
    assert manifest["config"]["train"]["seed"] == 123
    assert manifest["seed"] == 123


def test_train_ablation_and_beta_flags_recorded(tmp_path, dataset_dir):
    cfg = _write(tmp_path / "train.json", TINY_TRAIN)
    out = tmp_path / "flagged"
    code = main([
        "train", "--config", cfg, "--data", str(dataset_dir), "--out", str(out),
        "--ablation", "no_sub_shift", "--beta", "0.25",
    ])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["ablation"] == "no_sub_shift"
    assert manifest["config"]["model"]["shift_cap"] == 0.25
    model_cfg = json.loads((out / "model_config.json").read_text())
    assert model_cfg["ablation"] == "no_sub_shift"


def test_train_unknown_config_key_fails_validation(tmp_path, dataset_dir):
    bad = {**TINY_TRAIN, "model": {**TINY_TRAIN["model"], "hidden_sizes": 3}}
    cfg = _write(tmp_path / "train.json", bad)
    assert main(["train", "--config", cfg, "--data", str(dataset_dir), "--out", str(tmp_path / "o")]) == 1


def test_resume_with_zero_epochs_reproduces_metrics(tmp_path, dataset_dir, run_dir):
    resumed_cfg = {**TINY_TRAIN, "train": {**TINY_TRAIN["train"], "epochs": 0}}
    cfg = _write(tmp_path / "resume.json", resumed_cfg)
    out = tmp_path / "resumed"
    code = main([
        "train", "--config", cfg, "--data", str(dataset_dir), "--out", str(out),
        "--resume", str(run_dir),
    ])
    assert code == 0
    original = json.loads((run_dir / "metrics.json").read_text())
    resumed = json.loads((out / "metrics.json").read_text())
    assert resumed == original
    assert (out / "checkpoint.bin").read_bytes() == (run_dir / "checkpoint.bin").read_bytes()


def test_loaded_model_matches_checkpoint(run_dir):
    model = load_model_dir(run_dir)
    assert model.config.ablation == "full"
    assert model.store.total_count() > 0


def test_ablate_produces_comparison(tmp_path, dataset_dir):
    doc = {**TINY_TRAIN, "seeds": [4, 5]}
    cfg = _write(tmp_path / "ablate.json", doc)
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", cfg, "--data", str(dataset_dir), "--out", str(out)]) == 0
    comparison = json.loads((out / "comparison.json").read_text())
    assert set(comparison["variants"]) == {"full", "no_sub", "no_shift", "no_sub_shift"}
    assert comparison["seeds"] == [4, 5]
    for variant, row in comparison["variants"].items():
        assert len(row["runs"]) == 2
        assert {"mae", "correlation", "acc2"} <= set(row)
    table = (out / "comparison.txt").read_text()
    assert "full" in table and "no_sub_shift" in table
    assert (out / "ablation.png").stat().st_size > 0
    # per-run artifacts exist and differ only in the ablation flag
    manifests = {}
    for variant in comparison["variants"]:
        run = out / "runs" / f"{variant}-seed4"
        assert (run / "checkpoint.bin").exists()
        manifests[variant] = json.loads((run / "model_config.json").read_text())
    baseline = {k: v for k, v in manifests["full"].items() if k != "ablation"}
    for variant, cfg_doc in manifests.items():
        assert {k: v for k, v in cfg_doc.items() if k != "ablation"} == baseline
        assert cfg_doc["ablation"] == variant


def test_ablate_rejects_explicit_ablation_key(tmp_path, dataset_dir):
    doc = {**TINY_TRAIN, "model": {**TINY_TRAIN["model"], "ablation": "full"}}
    cfg = _write(tmp_path / "ablate.json", doc)
    assert main(["ablate", "--config", cfg, "--data", str(dataset_dir), "--out", str(tmp_path / "o")]) == 1


def test_analyze_exports_and_determinism(tmp_path, dataset_dir, run_dir):
    outs = []
    for tag in ("a1", "a2"):
        out = tmp_path / tag
        code = main([
            "analyze", "--checkpoint", str(run_dir), "--data", str(dataset_dir),
            "--split", "test", "--out", str(out),
        ])
        assert code == 0
        assert (out / "summary.json").exists() and (out / "points.csv").exists()
        outs.append(out)
    assert (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()
    assert (outs[0] / "points.csv").read_bytes() == (outs[1] / "points.csv").read_bytes()
    header = (outs[0] / "points.csv").read_text().splitlines()[0]
    assert header == "word,x,y,polarity,shift_scale,utterance_id"


def test_analyze_rejects_concat_checkpoints(tmp_path, dataset_dir):
    cfg = _write(tmp_path / "train.json", TINY_TRAIN)
    run = tmp_path / "noshift-run"
    assert main([
        "train", "--config", cfg, "--data", str(dataset_dir), "--out", str(run), "--ablation", "no_shift",
    ]) == 0
    code = main([
        "analyze", "--checkpoint", str(run), "--data", str(dataset_dir), "--out", str(tmp_path / "o"),
    ])
    assert code == 1


def test_grad_check_passes_and_reports(tmp_path):
    out = tmp_path / "gc"
    assert main(["grad-check", "--out", str(out)]) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] is True
    assert report["max_rel_err"] < 1e-4
    assert report["step"] == 1e-3


def test_grad_check_determinism(tmp_path):
    reports = []
    for tag in ("g1", "g2"):
        out = tmp_path / tag
        assert main(["grad-check", "--out", str(out)]) == 0
        reports.append((out / "gradcheck.json").read_bytes())
    assert reports[0] == reports[1]


def test_grad_check_fault_injection_exits_3(tmp_path):
    out = tmp_path / "broken"
    assert main(["grad-check", "--out", str(out), "--inject-gradient-error"]) == 3
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] is False


def test_invalid_log_level_is_validation_error(tmp_path, monkeypatch):
    monkeypatch.setenv("RAVEN_LOG_LEVEL", "loud")
    assert main(["grad-check", "--out", str(tmp_path / "x")]) == 1


def test_log_level_accepts_known_values(tmp_path, monkeypatch):
    monkeypatch.setenv("RAVEN_LOG_LEVEL", "warn")
    assert main(["grad-check", "--out", str(tmp_path / "y")]) == 0


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1


def test_no_tmp_files_left_behind(dataset_dir, run_dir):
    for base in (dataset_dir, run_dir):
        leftovers = [p for p in base.rglob("*.tmp") if p.is_file()]
        leftovers += [p for p in base.rglob("*.tmp-*") if p.is_file()]
        assert leftovers == []
