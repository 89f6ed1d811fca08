import json
import subprocess
import sys

import pytest

from xsilo.cli import main
from xsilo.mixnet import read_token_list


def test_solve_sensitivity(capsys):
    assert main(["solve-sensitivity", "--k", "1", "--C", "1", "--delta-prime", "0.05"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.959964, abs=1e-6)


def test_analyze_amplification(tmp_path, capsys):
    main(["analyze-amplification", "--n", "100", "--b", "10", "--slacks", "0,0.01", "--adv-fracs", "0,0.5"])
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "adv_frac,slack,swor_frac,poisson_frac" and len(lines) == 5
    main(["analyze-amplification", "--n", "100", "--b", "10", "--out", str(tmp_path)])
    assert (tmp_path / "amplification.csv").exists()


def test_make_token_list(tmp_path, capsys):
    out = tmp_path / "t.xstl"
    assert main(["make-token-list", "--parties", "3", "--samples-per-party", "4", "--out", str(out)]) == 0
    assert len(read_token_list(out)) == 12


def test_run_experiment(tmp_path, capsys):
    cfg = {
        "seed": 2,
        "parties": {"count": 3, "samples_per_party": 30},
        "protocol": {"kind": "dca", "compute_nodes": 2},
        "train": {"regime": "dp_smc", "steps": 3, "batch_size": 20, "noise_multiplier": 3.0},
        "dataset": {"kind": "gaussian_mixture", "n_features": 5, "n_classes": 2, "n_test": 50},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["run-experiment", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["status"] == "ok" and summary["privacy"]["epsilon"] > 0
    assert (tmp_path / "out" / "curve.csv").read_text().startswith("step,loss,accuracy")


def test_module_entry_point_and_log_env(tmp_path):
    env = {"XSILO_LOG": "debug", "PATH": ""}
    r = subprocess.run(
        [sys.executable, "-m", "xsilo", "solve-sensitivity", "--k", "4", "--delta-prime", "0.1"],
        capture_output=True, text=True, env=env, check=True,
    )
    assert float(r.stdout) > 1.0


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
