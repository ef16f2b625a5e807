import csv
import json
import os

import pytest

from rebandit.cli import main


def test_run_compare_replay_diagnose_roundtrip(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"n_users": 3, "n_days": 7, "n_trials": 2, "seed": 14}))

    out_a = tmp_path / "run_rebandit"
    rc = main(
        [
            "run", "--config", str(cfg_path), "--algorithm", "rebandit",
            "--variant", "minimal-high-100", "--out", str(out_a),
        ]
    )
    assert rc == 0
    assert (out_a / "summary.csv").exists()
    with open(out_a / "summary.csv", encoding="utf-8") as fh:
        row = list(csv.DictReader(fh))[0]
    assert row["algorithm"] == "rebandit"
    assert row["variant"] == "minimal-high-100"

    out_b = tmp_path / "run_random"
    rc = main(
        [
            "run", "--config", str(cfg_path), "--algorithm", "random",
            "--variant", "minimal-high-100", "--out", str(out_b),
        ]
    )
    assert rc == 0

    cmp_csv = tmp_path / "cmp.csv"
    rc = main(["compare", "--a", str(out_a), "--b", str(out_b), "--out", str(cmp_csv)])
    assert rc == 0
    with open(cmp_csv, encoding="utf-8") as fh:
        row = list(csv.DictReader(fh))[0]
    assert row["algorithm_a"] == "rebandit"
    assert int(row["wins_a"]) + int(row["wins_b"]) + int(row["ties"]) == 2

    log = out_a / "logs" / "trial_00000.jsonl"
    assert main(["replay", "--log", str(log)]) == 0

    diag_csv = tmp_path / "diag.csv"
    assert main(["diagnose", "--log", str(log), "--out", str(diag_csv)]) == 0
    assert diag_csv.exists()

    capsys.readouterr()


def test_run_rejects_unknown_variant(tmp_path):
    with pytest.raises(ValueError):
        main(["run", "--variant", "not-a-variant", "--trials", "1", "--out", str(tmp_path / "x")])


def test_variant_numeric_alias(tmp_path, capsys):
    rc = main(
        [
            "run", "--algorithm", "random", "--variant", "5", "--trials", "1",
            "--users", "2", "--seed", "3", "--out", str(tmp_path / "v5"),
        ]
    )
    assert rc == 0
    manifest = json.loads((tmp_path / "v5" / "manifest.json").read_text())
    assert manifest["config"]["env"]["treatment_effect"] == "minimal"
    assert manifest["config"]["env"]["habituation"] == "high"
    assert manifest["config"]["env"]["habituation_proportion"] == 1.0
    capsys.readouterr()
