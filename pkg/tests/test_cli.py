import json
import subprocess
import sys

import pytest

from hybrid_debias.cli import main
from hybrid_debias.datagen import read_dataset
from hybrid_debias.experiment import read_csv_rows
from hybrid_debias.nncore import load_model

TINY = ["--samples-per-class", "20", "--sigma", "0.1", "--height", "6", "--width", "6"]
FAST = ["--epochs", "2", "--batch-size", "32"]


def test_generate_train_eval(tmp_path, capsys):
    assert main(["generate", *TINY, "--out", str(tmp_path / "train.dbds")]) == 0
    assert main(["generate", *TINY, "--unbiased-test", "100", "--out", str(tmp_path / "test.dbds")]) == 0
    capsys.readouterr()
    assert len(read_dataset(tmp_path / "train.dbds")) == 200
    assert len(read_dataset(tmp_path / "test.dbds")) == 100

    assert main(["train", "--data", str(tmp_path / "train.dbds"), "--eval-data", str(tmp_path / "test.dbds"),
                 "--method", "hybrid", *FAST, "--out-model", str(tmp_path / "d.dbmw"),
                 "--out-model-b", str(tmp_path / "b.dbmw"), "--history", str(tmp_path / "h.jsonl"),
                 "--plot", str(tmp_path / "dyn.png")]) == 0
    capsys.readouterr()
    assert load_model(tmp_path / "d.dbmw").layer_dims == [108, 100, 100, 100, 10]
    assert (tmp_path / "b.dbmw").exists() and (tmp_path / "dyn.png").stat().st_size > 0
    hist = [json.loads(l) for l in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert [h["epoch"] for h in hist] == [1, 2]

    assert main(["eval", "--model", str(tmp_path / "d.dbmw"), "--data", str(tmp_path / "test.dbds"),
                 "--out", str(tmp_path / "eval.json"), "--export-features", str(tmp_path / "f.dbft")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((tmp_path / "eval.json").read_text())
    assert printed["n"] == 100 and (tmp_path / "f.dbft").exists()


def _config(tmp_path):
    cfg = {"dataset": {"samples_per_class": 20, "sigma": 0.1, "p": 0.5, "height": 6, "width": 6},
           "debias": {"epochs": 2, "batch_size": 32, "hidden": [8]}, "seeds": [0, 1], "test_n": 100}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def test_report_with_config(tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["report", "--config", str(_config(tmp_path)), "--methods", "vanilla,hybrid",
                 "--out-dir", str(out)]) == 0
    rows = read_csv_rows(capsys.readouterr().out)
    assert [r["method"] for r in rows] == ["vanilla", "hybrid"]
    assert all(r["seed_count"] == 2 and r["epochs"] == 2 for r in rows)
    assert (out / "accuracy.png").exists() and (out / "hybrid" / "dynamics_seed1.png").exists()
    assert read_csv_rows((out / "results.csv").read_text()) == rows

    again = tmp_path / "again"
    assert main(["report", "--from-dir", str(out / "hybrid"), "--out-dir", str(again)]) == 0
    regen = read_csv_rows(capsys.readouterr().out)[0]
    assert regen["conflicting_acc_mean"] == pytest.approx(rows[1]["conflicting_acc_mean"])


def test_sweep_cli(tmp_path, capsys):
    assert main(["sweep", "--config", str(_config(tmp_path)), "--seeds", "0", "--grid", "tbc=0.9,0.95",
                 "--out-dir", str(tmp_path / "sw")]) == 0
    rows = read_csv_rows(capsys.readouterr().out)
    assert [r["t_bc"] for r in rows] == [0.9, 0.95]
    assert (tmp_path / "sw" / "sweep_t_bc.png").exists() and (tmp_path / "sw" / "sweep.csv").exists()


def test_flags_override_config(tmp_path):
    from hybrid_debias.cli import build_parser, experiment_config
    args = build_parser().parse_args(["report", "--config", str(_config(tmp_path)), "--beta", "3",
                                      "--data-seed", "7", "--out-dir", str(tmp_path)])
    cfg = experiment_config(args)
    assert cfg.debias.beta == 3.0 and cfg.dataset.seed == 7 and cfg.debias.epochs == 2


def test_bad_arguments_exit_nonzero():
    proc = subprocess.run([sys.executable, "-m", "hybrid_debias.cli", "train", "--method", "magic",
                           "--out-model", "x"], capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr
