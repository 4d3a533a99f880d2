import json

import numpy as np
import pytest

from pisorb.cli import main

FAST = ["--widths", "6,6,6,6,6", "--epochs", "3,2,2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synthesize", "--out", root / "syn", "--experiments", 14, "--points", 6, "--seed", 1,
               "--source-model", "--source-experiments", 10, "--source-epochs", 3, "--widths", "6,6,6,6,6") == 0
    return root


def test_artifacts_always_present(workspace):
    for name in ("resolved_config.json", "versions.json", "data.csv", "generator.json", "source_model.json"):
        assert (workspace / "syn" / name).exists()


def test_split(workspace):
    out = workspace / "split"
    assert run("split", "--data", workspace / "syn" / "data.csv", "--out", out, "--test-fraction", 0.2,
               "--seed", 7) == 0
    bal = json.loads((out / "balance.json").read_text())
    assert bal["leakage"] == 0.0
    assert (out / "split.json").exists() and (out / "partition.csv").exists()


def test_noiseless_isotherm_recovery(tmp_path):
    assert run("synthesize", "--out", tmp_path / "s", "--experiments", 40, "--seed", 1, "--noiseless") == 0
    assert run("fit-isotherms", "--data", tmp_path / "s" / "data.csv", "--out", tmp_path / "f") == 0
    gen = json.loads((tmp_path / "s" / "generator.json").read_text())["params"]
    fit = json.loads((tmp_path / "f" / "sips_fit.json").read_text())
    for k in ("q_max", "K", "n"):
        assert abs(fit["params"][k] - gen[k]) / gen[k] < 0.02
    assert (tmp_path / "f" / "ensemble.csv").exists()


def test_train_variants(workspace, tmp_path):
    data = workspace / "syn" / "data.csv"
    assert run("train", "--data", data, "--out", tmp_path / "rr", "--variant", "random-random", *FAST) == 0
    metrics = json.loads((tmp_path / "rr" / "metrics.json").read_text())
    assert np.isfinite(metrics["rmse"])
    assert run("train", "--data", data, "--out", tmp_path / "tr", "--variant", "transfer",
               "--source-model", workspace / "syn" / "source_model.json", *FAST) == 0
    manifest = json.loads((tmp_path / "tr" / "transfer_manifest.json").read_text())
    assert manifest["fisher_attached"] and manifest["copied"]


def test_transfer_without_source_is_usage_error(workspace, tmp_path, capsys):
    assert run("train", "--data", workspace / "syn" / "data.csv", "--out", tmp_path, "--variant", "transfer") == 1
    assert "source-model" in capsys.readouterr().err


def test_exit_codes(workspace, tmp_path):
    assert run("bogus") == 1
    assert run("split", "--data", workspace / "syn" / "data.csv", "--out", tmp_path, "--no-such-flag") == 1
    assert run("split", "--data", tmp_path / "missing.csv", "--out", tmp_path) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("nothing,useful\n1,2\n")
    assert run("split", "--data", bad, "--out", tmp_path / "o") == 2
    assert run("train", "--data", workspace / "syn" / "data.csv", "--out", tmp_path / "w",
               "--variant", "random-random", "--widths", "1,2") == 1


def test_numerical_abort_exit_code(workspace, tmp_path):
    phases = [{"name": "warmup", "base_lr": 1e6, "max_epochs": 30, "lambda_reg": 0.0, "lambda_p": 0.05,
               "clip_norm": 1e12, "scheduler": "plateau"}]
    cur = tmp_path / "cur.json"
    cur.write_text(json.dumps(phases))
    code = run("train", "--data", workspace / "syn" / "data.csv", "--out", tmp_path / "t",
               "--variant", "random-random", "--curriculum", cur, "--widths", "6,6,6,6,6")
    assert code == 3
    assert (tmp_path / "t" / "curriculum.jsonl").exists()


def test_uq_and_explain(workspace, tmp_path):
    data = workspace / "syn" / "data.csv"
    # calibration metrics need at least 20 test rows
    assert run("train", "--data", data, "--out", tmp_path / "m", "--variant", "random-classical",
               "--test-fraction", 0.35, *FAST) == 0
    model, split = tmp_path / "m" / "model.json", tmp_path / "m" / "split.json"
    assert run("uq", "--data", data, "--model", model, "--split", split, "--out", tmp_path / "u", "--n-mc", 10) == 0
    rep = json.loads((tmp_path / "u" / "uq_report.json").read_text())
    assert 0.1 <= rep["calibrated"]["tau"] <= 3.0
    assert run("explain", "--data", data, "--model", model, "--split", split, "--out", tmp_path / "e", "--background", 10,
               "--coalitions", 20, "--bins", 5, "--max-rows", 3) == 0
    doc = json.loads((tmp_path / "e" / "explanation.json").read_text())
    assert len(doc["phi"]) == 3 and len(doc["ale"]) == 12


def test_ablate(workspace, tmp_path):
    assert run("ablate", "--data", workspace / "syn" / "data.csv", "--out", tmp_path / "a",
               "--source-model", workspace / "syn" / "source_model.json",
               "--variants", "transfer,random-random,ensemble-weighted", "--ensemble-size", 2, *FAST) == 0
    doc = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert set(doc["variants"]) == {"transfer", "random_random", "ensemble_weighted"}


def test_reruns_are_identical_regardless_of_workers(workspace, tmp_path, monkeypatch):
    data = workspace / "syn" / "data.csv"
    args = ["--source-model", workspace / "syn" / "source_model.json",
            "--variants", "transfer,ensemble-standard", "--ensemble-size", 2, "--seed", 3, *FAST]
    monkeypatch.setenv("PISORB_THREADS", "1")
    assert run("ablate", "--data", data, "--out", tmp_path / "a1", *args) == 0
    monkeypatch.setenv("PISORB_THREADS", "4")
    assert run("ablate", "--data", data, "--out", tmp_path / "a2", *args) == 0
    a = (tmp_path / "a1" / "ablation.json").read_bytes()
    assert a == (tmp_path / "a2" / "ablation.json").read_bytes()
    assert (tmp_path / "a1" / "split.json").read_bytes() == (tmp_path / "a2" / "split.json").read_bytes()
