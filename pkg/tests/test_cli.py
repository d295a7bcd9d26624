"""CLI: reproducible artifacts, command wiring, exports."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from crossrisk.cli import main
from crossrisk.export import read_values_csv
from crossrisk.stt1 import read_json, read_stt1

TINY_PROFILES = [
    {"name": "alpha", "w": 4, "h": 4, "n": 6, "valid_fraction": 0.75, "has_poi": True, "origin_weekday": 0, "peak_intensity": 12.0},
    {"name": "beta", "w": 3, "h": 4, "n": 5, "valid_fraction": 1.0, "has_poi": False, "origin_weekday": 0, "peak_intensity": 12.0},
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny gen-data + train pass shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps({"city_profiles": TINY_PROFILES, "weeks": 2, "cities": 2}))
    data = root / "data"
    assert main(["gen-data", "--config", str(config), "--seed", "5", "--out", str(data)]) == 0
    run = root / "run"
    assert (
        main(
            [
                "train", "--data", str(data), "--out", str(run), "--seed", "3",
                "--max-epochs", "2", "--batch-size", "64", "--d", "4", "--layers", "1",
            ]
        )
        == 0
    )
    return {"root": root, "config": config, "data": data, "run": run, "ckpt": run / "checkpoint"}


def test_gen_data_writes_cities_and_manifest(workspace):
    data = workspace["data"]
    assert (data / "alpha" / "x_geo.stt1").exists()
    assert (data / "beta" / "targets.stt1").exists()
    manifest = read_json(data / "manifest.json")
    assert manifest["command"] == "gen-data"
    assert manifest["config"]["seed"] == 5
    assert len(manifest["outputs"]) == 2


def test_gen_data_is_byte_reproducible(workspace, tmp_path):
    again = tmp_path / "data2"
    assert main(["gen-data", "--config", str(workspace["config"]), "--seed", "5", "--out", str(again)]) == 0
    for city in ("alpha", "beta"):
        for name in ("x_geo", "x_sem", "targets", "mask", "road", "risk", "poi", "map"):
            a = (workspace["data"] / city / f"{name}.stt1").read_bytes()
            b = (again / city / f"{name}.stt1").read_bytes()
            assert a == b, f"{city}/{name}"


def test_gen_data_rejects_zero_weeks():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--weeks", "0", "--out", "unused"])
    assert exc.value.code != 0


def test_train_writes_checkpoint_and_history(workspace):
    ckpt = workspace["ckpt"]
    assert (ckpt / "manifest.json").exists()
    history = (workspace["run"] / "history.csv").read_text().strip().splitlines()
    assert history[0] == "epoch,train_loss,val_loss"
    assert len(history) == 3  # header + 2 epochs
    manifest = read_json(workspace["run"] / "manifest.json")
    assert manifest["command"] == "train"


def test_eval_row_count_and_reports(workspace, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]), "--out", str(out)]) == 0
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "city,period,noise_level,rmse,recall_pct,map"
    assert len(rows) == 3  # 2 cities x 1 period
    payload = json.loads((out / "metrics.json").read_text())
    assert payload[0]["t_forward"] > 0 and payload[0]["t_batch"] > 0


def test_robustness_level_zero_matches_eval(workspace, tmp_path):
    out_eval = tmp_path / "e"
    out_rob = tmp_path / "r"
    assert main(["eval", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]), "--out", str(out_eval)]) == 0
    assert (
        main(
            [
                "robustness", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]),
                "--noise-levels", "0,0.5", "--out", str(out_rob), "--seed", "9",
            ]
        )
        == 0
    )
    eval_rows = (out_eval / "metrics.csv").read_text().strip().splitlines()[1:]
    rob_rows = (out_rob / "robustness.csv").read_text().strip().splitlines()[1:]
    assert len(rob_rows) == 4  # 2 levels x 2 cities
    for erow, rrow in zip(eval_rows, rob_rows[:2]):
        assert erow.split(",")[3:] == rrow.split(",")[3:]  # rmse, recall, map identical at level 0


def test_predict_writes_stt1_in_test_range(workspace, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]), "--out", str(out), "--heatmap"]) == 0
    vals = read_stt1(out / "riskmap_alpha.stt1")
    assert vals.shape == (4, 4)
    assert (out / "riskmap_alpha.pgm").exists()
    manifest = read_json(out / "manifest.json")
    step = manifest["config"]["step"]
    assert main(["predict", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]), "--out", str(tmp_path / "p2"), "--step", "0"]) == 1


def test_export_map_pgm_and_csv_round_trip(workspace, tmp_path):
    out = tmp_path / "maps"
    assert main(["export-map", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]), "--out", str(out)]) == 0
    manifest = read_json(out / "manifest.json")
    step = manifest["config"]["step"]
    pgm = (out / f"alpha_step{step}_pred.pgm").read_bytes()
    assert pgm.startswith(b"P5\n4 4\n255\n")
    assert len(pgm) == len(b"P5\n4 4\n255\n") + 16
    pair = (out / f"alpha_step{step}_pair.pgm").read_bytes()
    assert pair.startswith(b"P5\n9 4\n255\n")
    pred_csv, truth_csv, mask_csv = read_values_csv(out / f"alpha_step{step}.csv")
    pred_stt = read_stt1(out / f"alpha_step{step}_pred.stt1")
    assert np.max(np.abs(pred_csv - pred_stt)) < 1e-9
    assert mask_csv.sum() == 12  # 0.75 * 16 valid cells


def test_uniform_prediction_renders_uniform_gray(tmp_path):
    from crossrisk.export import write_pgm

    write_pgm(tmp_path / "u.pgm", np.full((3, 2), 7.5), np.ones((3, 2), bool))
    raw = (tmp_path / "u.pgm").read_bytes()
    body = raw[len(b"P5\n3 2\n255\n") :]
    assert len(set(body)) == 1  # constant field -> one gray level over valid cells


def test_manifest_reruns_reproduce_outputs(workspace, tmp_path):
    # use the gen-data manifest itself as the config for a re-run
    manifest_path = workspace["data"] / "manifest.json"
    again = tmp_path / "redo"
    assert main(["gen-data", "--config", str(manifest_path), "--out", str(again)]) == 0
    a = (workspace["data"] / "alpha" / "targets.stt1").read_bytes()
    b = (again / "alpha" / "targets.stt1").read_bytes()
    assert a == b


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "crossrisk.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
