from __future__ import annotations

import subprocess
import sys

import yaml

from opendg import runner
from opendg.cli import main


def _write_config(tmp_path):
    raw = runner.config_to_dict(runner.default_config())
    raw["problem"]["n_per_class"] = 8
    raw["train"].update(max_epochs=2, hidden=[4], feature_dim=3)
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return path


def test_run_then_report(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--methods", "erm,mmd", "--out", str(out), "--seed", "3"]) == 0
    assert "records written" in capsys.readouterr().out
    records = runner.read_results(out / "results.csv")
    assert len(records) == 8 and {r.method for r in records} == {"erm", "mmd"}
    assert main(["report", str(out)]) == 0
    assert "avg H" in capsys.readouterr().out


def test_fixed_delta_flag(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--methods", "erm", "--delta", "0.45", "--out", str(out)]) == 0
    assert all(r.delta == 0.45 for r in runner.read_results(out / "results.csv"))


def test_errors_exit_nonzero_with_one_line(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.yaml")]) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("opendg: error:") and "\n" not in err
    cfg = _write_config(tmp_path)
    assert main(["run", str(cfg), "--methods", "bogus"]) != 0
    assert "valid methods" in capsys.readouterr().err
    assert main(["report", str(tmp_path)]) != 0


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--instances", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "opendg", "run", "/no/such/file.yaml"], capture_output=True, text=True)
    assert proc.returncode != 0
    assert len(proc.stderr.strip().splitlines()) == 1
