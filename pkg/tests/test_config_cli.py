import json

import pytest

from pctlab import cli, coherence, tasks
from pctlab.cells import CellConfig
from pctlab.config import ConfigError, ExperimentConfig, SweepSpec, VerifySpec
from pctlab.train import TrainConfig

TINY = ["--cell", "complex_sigmoid", "--task", "copy", "--k", "2", "--delay", "2", "--dim", "8", "--heads", "2",
        "--depth", "1", "--ff-mult", "2", "--batch", "4", "--steps", "2", "--eval-every", "1", "--eval-n", "8",
        "--quiet"]


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("PCTLAB_OUT", str(tmp_path / "out"))


def parse(*argv):
    return cli.build_parser().parse_args(list(argv))


# config documents

def test_config_roundtrip_bit_identical():
    exp = ExperimentConfig(task="listops", task_params={"max_depth": 2},
                           sweep=SweepSpec("gate", ["sigmoid", "relu"]), verify=VerifySpec(["complex_relu"]),
                           seeds=[0, 1, 2])
    text = exp.dumps()
    again = ExperimentConfig.loads(text)
    assert again.dumps() == text
    assert again == exp


def test_config_defaults_are_complete():
    exp = ExperimentConfig()
    assert exp.train["lr"] == 3e-3 and exp.train["batch"] == 32 and exp.train["ff_mult"] == 4
    assert exp.task_params == tasks.resolve_params("copy", {})


@pytest.mark.parametrize("doc, field", [
    ({"lr": 1}, "config.lr"),
    ({"train": {"lrr": 1}}, "train.lrr"),
    ({"cell": {"cell": "complex_sigmoid", "width": 3}}, "cell.width"),
    ({"sweep": {"axis": "lr", "values": [1], "extra": 1}}, "sweep.extra"),
    ({"verify": {"cells": [], "depth": 1}}, "verify.depth"),
])
def test_unknown_keys_rejected_with_field(doc, field):
    with pytest.raises(ConfigError, match=field):
        ExperimentConfig.from_dict(doc)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError, match="train"):
        ExperimentConfig(train={"lr": -1.0})
    with pytest.raises(ConfigError, match="task"):
        ExperimentConfig(task="copy", task_params={"KK": 3})
    with pytest.raises(ConfigError, match="sweep.axis"):
        SweepSpec("width", [1])
    with pytest.raises(ConfigError, match="seeds"):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.loads("{")


def test_train_config_per_seed():
    exp = ExperimentConfig(seeds=[3, 4])
    tc = exp.train_config(4)
    assert isinstance(tc, TrainConfig) and tc.seed == 4 and tc.cell == exp.cell


# gen

def test_gen_deterministic(tmp_path):
    argv = ["gen", "copy", "--k", "10", "--delay", "100", "--n", "50", "--seed", "0"]
    assert cli.main(argv + ["--out", str(tmp_path / "a.bin")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b.bin")]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    samples, side = tasks.read_dataset(tmp_path / "a.bin")
    assert len(samples) == 50 and side["params"]["K"] == 10 and side["params"]["delay"] == 100


def test_gen_default_location(tmp_path):
    assert cli.main(["gen", "niah", "--n", "3"]) == 0
    assert (tmp_path / "out" / "data" / "niah-s0-n3.bin").exists()


def test_gen_listops_params(tmp_path):
    assert cli.main(["gen", "listops", "--max-depth", "2", "--max-args", "3", "--n", "5",
                     "--out", str(tmp_path / "l.bin")]) == 0
    _, side = tasks.read_dataset(tmp_path / "l.bin")
    assert side["params"]["max_depth"] == 2 and side["params"]["max_args"] == 3


def test_gen_rejects_foreign_flag(tmp_path, capsys):
    assert cli.main(["gen", "copy", "--bins", "3", "--out", str(tmp_path / "x.bin")]) == 1
    assert "error" in capsys.readouterr().err


def test_gen_param_escape_hatch(tmp_path):
    assert cli.main(["gen", "copy", "--param", "V=5", "--n", "2", "--out", str(tmp_path / "p.bin")]) == 0
    assert tasks.read_dataset(tmp_path / "p.bin")[1]["params"]["V"] == 5


# train

def test_isolation_flag_set_parses():
    args = parse("train", "--cell", "complex_sigmoid", "--task", "copy", "--delay", "1000", "--dim", "128",
                 "--depth", "4", "--heads", "4", "--dim-head", "32", "--batch", "32", "--lr", "3e-3",
                 "--steps", "2000", "--seeds", "3")
    exp = cli.experiment_from_args(args)
    assert exp.cell == CellConfig("complex_sigmoid", dim=128, heads=4, dim_head=32, seq_len=exp.cell.seq_len)
    assert exp.task_params["delay"] == 1000 and exp.seeds == [0, 1, 2]
    tc = exp.train_config(2)
    assert (tc.depth, tc.ff_mult, tc.batch, tc.lr, tc.total_steps) == (4, 4, 32, 3e-3, 2000)


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(ExperimentConfig(train={"lr": 1e-3, "batch": 8}).dumps())
    exp = cli.experiment_from_args(parse("train", "--config", str(path), "--lr", "2e-3"))
    assert exp.train["lr"] == 2e-3 and exp.train["batch"] == 8


def test_train_writes_runs_and_refuses_rerun(tmp_path):
    out = tmp_path / "run"
    argv = ["train", *TINY, "--out", str(out), "--seeds", "2"]
    assert cli.main(argv) == 0
    for seed in (0, 1):
        for name in ("config.json", "metrics.jsonl", "summary.json"):
            assert (out / f"seed{seed}" / name).exists()
    assert ExperimentConfig.load(out / "experiment.json").seeds == [0, 1]
    assert cli.main(argv) == 1
    assert cli.main(argv + ["--force"]) == 0


def test_train_precision_flag(tmp_path):
    assert cli.main(["train", *TINY, "--precision", "f64", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "config.json").read_text())["precision"] == "f64"


def test_train_bad_config_exit_code(tmp_path, capsys):
    assert cli.main(["train", *TINY, "--dim", "9", "--out", str(tmp_path)]) == 1
    assert "cell" in capsys.readouterr().err


# verify

def test_verify_single_cells(capsys):
    assert cli.main(["verify", "--cell", "complex_sigmoid"]) == 0
    assert cli.main(["verify", "--cell", "complex_softmax"]) == 0
    out = capsys.readouterr().out
    assert "| complex_softmax |" in out


def test_verify_all_table(tmp_path, capsys):
    assert cli.main(["verify", "--all", "--json", str(tmp_path / "r.json")]) == 0
    table = capsys.readouterr().out
    for cell in ("complex_tanh1", "complex_cubic", "real_softmax"):
        assert f"| {cell} |" in table
    assert len(json.loads((tmp_path / "r.json").read_text())) == 11


def test_verify_mismatch_exit_code(monkeypatch, capsys):
    real = coherence.full_audit

    def wrong(cell, **kw):
        r = real(cell, **kw)
        r.checks["c3"] = {"expected": "satisfied", "observed": "violated", "pass": False}
        return r

    monkeypatch.setattr(cli, "full_audit", wrong)
    assert cli.main(["verify", "--cell", "complex_relu"]) == 2
    assert "MISMATCH complex_relu c3" in capsys.readouterr().err


# sweep and report

def test_gate_sweep_report_matrix(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", *TINY, "--axis", "gate", "--values", "sigmoid,softplus,cubic,clamped_relu,relu",
                     "--out", str(out)]) == 0
    assert cli.main(["report", str(out)]) == 0
    md = (out / "report.md").read_text()
    assert "## Gate isolation matrix" in md
    for gate in ("sigmoid", "softplus", "cubic", "clamped_relu", "relu"):
        assert f"complex_{gate}" in md
    first = md, (out / "report.csv").read_text()
    assert cli.main(["report", str(out)]) == 0
    assert ((out / "report.md").read_text(), (out / "report.csv").read_text()) == first


def test_report_seed_runs_median_iqr(tmp_path):
    out = tmp_path / "seeds"
    assert cli.main(["train", *TINY, "--seeds", "3", "--out", str(out)]) == 0
    assert cli.main(["report", str(out)]) == 0
    md = (out / "report.md").read_text()
    header = next(line for line in md.splitlines() if line.startswith("| cell"))
    assert "median" in header and "IQR" in header
    assert "| 3 |" in md


def test_report_empty_directory(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", str(tmp_path / "empty")]) == 1
    assert "no runs found" in capsys.readouterr().err


def test_report_lists_missing_artifacts(tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["train", *TINY, "--seeds", "2", "--out", str(out)]) == 0
    (out / "seed1" / "summary.json").unlink()
    assert cli.main(["report", str(out)]) == 1
    md = (out / "report.md").read_text()
    assert "## Missing or unreadable artifacts" in md and "seed1" in md


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "pctlab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify" in res.stdout
