import json

import pytest

from bamssl import data as ds
from bamssl.calibration import convergence_report
from bamssl.cli import main
from bamssl.harness import MetricsRow, write_metrics

SMALL = ["--set", "data.n_per_class=50", "--set", "data.test_per_class=10",
         "--set", "model.hidden=8", "--set", "experiment.epochs=2"]


def test_presets(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    assert "UDA: mu=7 tau=0.8 t=0.4" in out
    assert "BAM-UDA: mu=7 tau=0.8 t=0.9" in out
    assert len(out.strip().splitlines()) == 6


def test_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.ini")]) == 1
    assert "not found" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert main(["run", "--frobnicate"]) == 2
    assert main(["launch"]) == 2


def test_bad_override(capsys):
    assert main(["run", "--set", "bam.M=1"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_run_then_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["--seed", "4", "--out", str(out), "--quiet", "run", "--set",
                 "experiment.method=FM"] + SMALL) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 4
    capsys.readouterr()
    assert main(["report", str(out / "metrics.csv")]) == 0
    assert json.loads(capsys.readouterr().out) == summary["convergence"]


def test_run_from_config_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nmethod = PL\nepochs = 1\n[data]\nn_per_class = 40\ntest_per_class = 10\n")
    assert main(["--out", str(tmp_path / "o"), "--quiet", "run", str(cfg)]) == 0
    assert (tmp_path / "o" / "config.ini").exists()


def test_report_hand_built(tmp_path, capsys):
    accs = [0.2, 0.4, 0.9, 0.5, 0.6]
    rows = [MetricsRow(i, i, test_accuracy=a, test_ece=a / 10) for i, a in enumerate(accs)]
    p = tmp_path / "m.csv"
    write_metrics(p, rows)
    assert main(["report", str(p)]) == 0
    rep = json.loads(capsys.readouterr().out)
    # five checkpoints, window covers all; median 0.5 at epoch 3
    assert rep == {"accuracy": 0.5, "ece": 0.05, "checkpoint_index": 3, "checkpoint_epoch": 3}
    assert convergence_report(list(zip(accs, [a / 10 for a in accs]))).accuracy == 0.5


def test_report_missing_file(tmp_path):
    assert main(["report", str(tmp_path / "m.csv")]) == 1


def test_curate(tmp_path, capsys):
    out = tmp_path / "lt.csv"
    assert main(["--out", str(out), "curate", "--K", "4", "--n-max", "100", "--alpha", "10",
                 "--test-per-class", "5"]) == 0
    split = ds.read_split_csv(out)
    assert split.class_counts.tolist() == ds.long_tail_counts(4, 100, 10)
    assert len(split.test_y) == 20
    assert "wrote" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["--help"], ["run", "--help"]])
def test_help_exits_zero(argv, capsys):
    assert main(argv) == 0
