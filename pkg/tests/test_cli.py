import shutil
import subprocess
import sys

import pytest
import yaml

from trajfuse.cli import STAGES, main
from trajfuse.config import load_config
from trajfuse.synthetic import golden_dir

OUTPUTS = ["traj.csv", "route.csv", "conflict.csv", "violation.csv", "cycle_rates.csv",
           "metrics.txt", "manifest.txt", "filter_report.csv", "traj_georef.csv",
           "traj_smooth.csv", "traj_filtered.csv", "calibration.txt", "map_local.geojson"]


@pytest.fixture(scope="module")
def golden_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("golden")
    shutil.copytree(golden_dir(), d, dirs_exist_ok=True, ignore=shutil.ignore_patterns("expected"))
    assert main(["all", "--config", str(d / "config.yaml")]) == 0
    return d


def test_golden_regression(golden_run):
    expected = golden_dir() / "expected"
    for p in sorted(expected.iterdir()):
        assert (golden_run / "out" / p.name).read_bytes() == p.read_bytes(), p.name


def test_all_equals_stages_in_order(golden_run, tmp_path):
    d = tmp_path / "g"
    shutil.copytree(golden_dir(), d, ignore=shutil.ignore_patterns("expected"))
    for stage in STAGES:
        assert main([stage, "--config", str(d / "config.yaml")]) == 0, stage
    for name in OUTPUTS:
        assert (d / "out" / name).read_bytes() == (golden_run / "out" / name).read_bytes(), name


def test_print_config(golden, capsys):
    assert main(["all", "--config", str(golden / "config.yaml"), "--print-config"]) == 0
    dumped = yaml.safe_load(capsys.readouterr().out)
    assert dumped["conflict"]["ttc_max_s"] == 2.0
    assert dumped["signal"]["reference_movement"] == "NS"
    assert "bands" in dumped["conflict"] and "smoother" in dumped
    assert not (golden / "out").exists()


def test_missing_prior_artifact(golden, capsys):
    assert main(["conflicts", "--config", str(golden / "config.yaml")]) == 1
    err = capsys.readouterr().err
    assert "traj_smooth.csv" in err and "'smooth' stage" in err


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("config_version: 1\nfilter: {bogus: 1}\n")
    assert main(["all", "--config", str(tmp_path / "c.yaml")]) == 2
    assert "filter.bogus: unknown key" in capsys.readouterr().err


def test_missing_input(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("config_version: 1\n")
    assert main(["georef", "--config", str(tmp_path / "c.yaml")]) == 1
    assert "input file not found" in capsys.readouterr().err


def test_out_override_and_threads(golden):
    cfg = load_config(golden / "config.yaml")
    assert cfg.threads == 1
    assert main(["georef", "--config", str(golden / "config.yaml"), "--out",
                 str(golden / "alt"), "--threads", "2"]) == 0
    assert (golden / "alt" / "traj_georef.csv").exists()
    assert main(["georef", "--config", str(golden / "config.yaml"), "--threads", "0"]) == 2


def test_strict_turns_warnings_into_errors(golden, capsys):
    text = (golden / "tracks.csv").read_text().splitlines()
    text.append(text[-1].split(",", 1)[0] + ",9999,car,nan,1,1,1,0,0.9")
    (golden / "tracks.csv").write_text("\n".join(text) + "\n")
    assert main(["georef", "--config", str(golden / "config.yaml"), "--strict"]) == 1
    assert "non-finite" in capsys.readouterr().err


def test_module_entry_point(golden):
    r = subprocess.run([sys.executable, "-m", "trajfuse", "georef", "--config",
                        str(golden / "config.yaml")], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "georef:" in r.stderr
