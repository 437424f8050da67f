import subprocess
import sys

import pytest

from funcent.cli import build_parser, run_command
from funcent.config import OPTIONS

BLOBS = ["--source", "blobs", "--blob-train", "200", "--blob-test", "100"]
QUICK = ["--epochs", "3", "--window", "2", "--hidden", "8", "--info-eval-count", "16", "--info-eval-K", "2"]


def test_verify_core_suite(capsys):
    assert run_command(["verify", "--suite", "core", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "all inequalities hold" in out
    assert out.count("\nok ") + out.startswith("ok ") >= 4


def test_verify_exits_one_on_failure(capsys):
    # a negative tolerance makes every check fail, exercising the failure path
    assert run_command(["verify", "--seed", "1", "--samples", "2000", "--tol-sigmas=-1e9"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_missing_config_exit_code(tmp_path, capsys):
    missing = tmp_path / "missing.cfg"
    assert run_command(["train", "--config", str(missing), "--out-dir", str(tmp_path / "o")]) == 3
    assert str(missing) in capsys.readouterr().err


def test_bad_config_value_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[regularizer]\nlambda = banana\n")
    assert run_command(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 3
    assert "lambda" in capsys.readouterr().err


def test_usage_errors():
    assert run_command([]) == 2
    assert run_command(["fly"]) == 2
    assert run_command(["train"]) == 2
    assert run_command(["train", "--out-dir", "x", "--lambda", "banana"]) == 2


def test_help_lists_every_flag(capsys):
    for cmd in ("gen-data", "train", "eval", "estimate", "verify", "report"):
        assert run_command([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in text, (cmd, flag)
    run_command(["train", "--help"])
    text = capsys.readouterr().out
    assert all(o.cli_flag in text for o in OPTIONS)


def test_train_report_eval_estimate(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["train", "--out-dir", str(out), *BLOBS, *QUICK, "--mode", "fisher_tensorized", "--lambda", "0.1"]
    assert run_command(args) == 0
    assert "convg=" in capsys.readouterr().out
    for name in ("metrics.csv", "final.fent", "best.fent", "resolved.cfg"):
        assert (out / name).exists()
    assert "lambda = 0.1  # flag" in (out / "resolved.cfg").read_text()

    assert run_command(["report", str(out / "metrics.csv")]) == 0
    table = capsys.readouterr().out
    assert "Convg." in table and "Max" in table and "fisher_tensorized" in table

    assert run_command(["eval", "--checkpoint", str(out / "final.fent"), *BLOBS]) == 0
    assert "test accuracy" in capsys.readouterr().out

    est = ["estimate", "--checkpoint", str(out / "final.fent"), "--index", "3", "--samples", "500", *BLOBS]
    assert run_command(est + ["--kind", "fisher"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["modality=0", "modality=1"]
    assert run_command(est[:-6] + ["--index", "99999", *BLOBS]) == 3


def test_train_is_idempotent(tmp_path):
    for d in ("a", "b"):
        assert run_command(["train", "--out-dir", str(tmp_path / d), *BLOBS, *QUICK]) == 0
    for name in ("metrics.csv", "final.fent", "best.fent"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_round_trip(tmp_path, capsys):
    path = tmp_path / "blobs.cmn"
    assert run_command(["gen-data", "--out", str(path), *BLOBS, "--data-seed", "4"]) == 0
    first = path.read_bytes()
    assert run_command(["gen-data", "--out", str(path), *BLOBS, "--data-seed", "4"]) == 0
    assert path.read_bytes() == first
    out = tmp_path / "run"
    assert run_command(["train", "--out-dir", str(out), "--dataset", str(path), *QUICK]) == 0
    corrupt = tmp_path / "bad.cmn"
    corrupt.write_bytes(b"XXXX" + first[4:])
    assert run_command(["eval", "--checkpoint", str(out / "final.fent"), "--dataset", str(corrupt)]) == 3


def test_estimate_probe(capsys):
    assert run_command(["estimate", "--probe", "exp", "--samples", "20000", "--kind", "entropy"]) == 0
    kind, value, *_ = capsys.readouterr().out.split("\t")
    assert kind == "entropy" and abs(float(value) - 0.8244) < 0.1
    assert run_command(["estimate", "--probe", "linear", "--probe-param", "5", "--kind", "poincare"]) == 0
    assert float(capsys.readouterr().out.split("\t")[1]) == pytest.approx(1.0)
    assert run_command(["estimate"]) == 3


def test_report_errors(tmp_path):
    bad = tmp_path / "x.csv"
    bad.write_text("a,b\n1,2\n")
    assert run_command(["report", str(bad)]) == 3
    assert run_command(["report", str(tmp_path / "none.csv")]) == 3


def test_missing_mnist_is_a_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv("FUNCENT_MNIST_DIR", raising=False)
    assert run_command(["gen-data", "--out", str(tmp_path / "x.cmn")]) == 3


def test_console_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "funcent.cli", "verify", "--samples", "5000"], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
