import json
import subprocess
import sys

import pytest

from tropattn.cli import EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, ExperimentConfig, UsageError, main


def test_lower_bound_verify_ok(tmp_path, capsys):
    assert main(["lower-bound-verify", "--out", str(tmp_path), "--samples", "100000"]) == EXIT_OK
    assert (tmp_path / "lower_bound_verify.csv").exists()


def test_stability_violation_exit_code(tmp_path):
    assert main(["stability", "--out", str(tmp_path)]) == EXIT_VIOLATION


def test_stability_inline_and_file_scores(tmp_path):
    assert main(["stability", "--out", str(tmp_path / "a"), "--scores", "[3, 1, 0]", "--tau", "0.5"]) == EXIT_OK
    f = tmp_path / "scores.json"
    f.write_text("[3, 1, 0]")
    assert main(["stability", "--out", str(tmp_path / "b"), "--scores-file", str(f), "--tau", "0.5"]) == EXIT_OK
    assert (tmp_path / "a" / "stability.csv").read_bytes() == (tmp_path / "b" / "stability.csv").read_bytes()


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["field", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["nonexistent"])
    assert exc.value.code == EXIT_USAGE
    assert main(["field", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "field"}))
    assert main(["minkowski-scaling", "--config", str(cfg)]) == EXIT_USAGE
    cfg.write_text(json.dumps({"experiment": "field", "params": {"nope": 1}}))
    assert main(["field", "--config", str(cfg)]) == EXIT_USAGE
    assert main(["field", "--out", str(tmp_path), "--grid", "4"]) == EXIT_USAGE


def test_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["stability", "--out", str(blocker / "sub"), "--scores", "[1, 0]"]) == EXIT_USAGE


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "experiment": "minkowski_scaling", "seed": 3, "output_dir": str(tmp_path / "from_file"),
        "params": {"n_list": [2], "h_list": [1, 2], "trials": 2},
    }))
    assert main(["minkowski-scaling", "--config", str(cfg)]) == EXIT_OK
    assert main(["minkowski-scaling", "--config", str(cfg), "--trials", "3", "--out", str(tmp_path / "flag")]) == EXIT_OK
    lines = (tmp_path / "flag" / "minkowski_trials.csv").read_text().splitlines()
    assert len(lines) == 2 + 2 * 3
    assert len((tmp_path / "from_file" / "minkowski_trials.csv").read_text().splitlines()) == 2 + 2 * 2


def test_default_seeds():
    assert ExperimentConfig("field").seed == 42
    assert ExperimentConfig("minkowski_scaling").seed == 7
    assert ExperimentConfig("region_scaling").seed == 1337
    with pytest.raises(UsageError):
        ExperimentConfig("unknown")
    with pytest.raises(UsageError):
        ExperimentConfig("field", format="xml")


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("THREADS", "3")
    assert main(["lower-bound-verify", "--out", str(tmp_path / "env"), "--samples", "100000",
                 "--grid", "[[2, 1, 2, 1]]"]) == EXIT_OK
    monkeypatch.setenv("THREADS", "x")
    assert main(["lower-bound-verify", "--out", str(tmp_path / "bad"), "--grid", "[[2, 1, 2, 1]]"]) == EXIT_USAGE


def test_console_script_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tropattn.cli", "stability", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_VIOLATION
    assert "hess" in proc.stderr
