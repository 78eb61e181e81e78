import csv
import json
import math

import pytest
import yaml

from shftrack.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from shftrack.config import ConfigError, config_from_dict, load_config

SMALL = {"duration_days": 3, "filter": {"n_h": 200, "n_chains": 16, "n_generations": 100},
         "pcrb_mc": 5}


def test_defaults_and_overrides():
    cfg = config_from_dict(None)
    assert cfg.duration_days == 60
    cfg = config_from_dict({"seed": 4, "orbit": {"inc_deg": 1.5},
                            "filter": {"p_max_m_s": 20, "tau_days": 2, "kappa": 7},
                            "sensors": [{"name": "x", "lat_deg": 10, "lon_deg": 20}]})
    assert cfg.seed == 4 and cfg.inc0_deg == 1.5
    assert cfg.filter.thresholds.p_max == pytest.approx(0.02)
    assert cfg.filter.tau == pytest.approx(2 * 86400.0) and cfg.filter.kappa == 7.0
    assert cfg.sensors[0].latitude == pytest.approx(math.radians(10))


@pytest.mark.parametrize("bad", [
    {"nonsense": 1},
    {"filter": {"n_particles": 3}},
    {"orbit": [1, 2]},
    {"initial_sigma": [1, 1, 1]},
    {"initial_sigma": [1, 1, 1, 1, 1, -1]},
    {"tracks": {"length_min": [10, 2]}},
    {"tracks": {"length_min": [0, 2]}},
    {"sensors": {"name": "x"}},
    {"sensors": [{"name": "x", "lat_deg": 1}]},
    {"duration_days": "soon"},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return str(p)


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("nonsense: 1\n")
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_cli_runtime_error_exit_code(tmp_path):
    assert main(["metrics", "--run-dir", str(tmp_path / "nothing")]) == EXIT_RUNTIME


def test_cli_simulate(small_config, tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", small_config, "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "simulation.json").read_text())
    with open(out / "tracks.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == summary["n_tracks"] >= 2
    assert {"truth.csv", "maneuvers.csv", "b_jumps.csv"} <= {p.name for p in out.iterdir()}


def test_cli_region(small_config, tmp_path):
    out = tmp_path / "reg"
    assert main(["region", "--config", small_config, "--track-index", "1", "--grid", "11",
                 "--out", str(out)]) == EXIT_OK
    with open(out / "region.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 121
    assert all(float(r["P_km_s"]) >= 0 for r in rows)
    assert main(["region", "--config", small_config, "--track-index", "9999",
                 "--out", str(out)]) == EXIT_CONFIG
    assert main(["region", "--config", small_config, "--track-index", "1", "--grid", "1",
                 "--out", str(out)]) == EXIT_CONFIG


@pytest.mark.slow
def test_cli_track_metrics_compare(small_config, tmp_path, capsys):
    runs = []
    for method in ("mhe2", "shf2"):
        out = tmp_path / method
        assert main(["track", "--config", small_config, "--method", method, "--no-pcrb",
                     "--out", str(out)]) == EXIT_OK
        assert main(["metrics", "--run-dir", str(out)]) == EXIT_OK
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["method"] == method.upper()
        runs.append(str(out))
    table = tmp_path / "compare.csv"
    capsys.readouterr()
    assert main(["compare", "--run-dirs", *runs, "--out", str(table)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "MHE2" in printed and "SHF2" in printed
    with open(table) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["MHE2", "SHF2"]
