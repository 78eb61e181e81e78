import json
import math
from dataclasses import replace

import numpy as np
import pytest

from shftrack.constants import DAY
from shftrack.observation import SensorSite, observe
from shftrack.orbits import geo_mean_longitude, mee_to_rv
from shftrack.scenario import (ManeuverEvent, PlanningError, ScenarioConfig, TruthManeuver,
                               drift_rate, emit_reports, empty_report, generate_tracks,
                               initial_state, mean_reobservation_days, plan_station_keeping,
                               run_end_to_end, score_detections, simulate_truth,
                               truth_maneuver_table, visibility_windows)

SHORT = ScenarioConfig(duration_days=3.0)


@pytest.fixture(scope="module")
def short_truth():
    return simulate_truth(SHORT)


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(lon_halfwidth_deg=0.0)
    with pytest.raises(ValueError):
        ScenarioConfig(duration_days=-1.0)
    with pytest.raises(PlanningError):
        ManeuverEvent(0.0, "NSSK", (0.0, 0.0, 0.06))


def test_initial_state_in_slot():
    s = initial_state(SHORT)
    # the sub-satellite point of an inclined orbit librates by up to i^2/4 in longitude
    assert math.degrees(geo_mean_longitude(s)) == pytest.approx(-4.8, abs=0.02)
    assert math.degrees(s.inclination) == pytest.approx(2.0, abs=1e-9)
    assert s.srp_coeff == SHORT.B0


def test_no_events_at_band_centre():
    s = initial_state(SHORT)
    assert plan_station_keeping(SHORT, s, 0.0) == []


def test_nssk_planned_at_node():
    cfg = replace(SHORT, inc_center_deg=1.9, inc_halfwidth_deg=0.05)
    s = initial_state(cfg)
    ev = plan_station_keeping(cfg, s, 0.0)
    assert [e.kind for e in ev] == ["NSSK"]
    v = math.sqrt(398600.4418 / s.sma)
    assert abs(ev[0].dv[2]) == pytest.approx(2 * v * math.sin(math.radians(0.1) / 2), rel=1e-3)
    assert s.epoch < ev[0].epoch < s.epoch + DAY


def test_ewsk_pair_reverses_drift():
    cfg = replace(SHORT, lon_center_deg=-4.95)
    s = initial_state(cfg)
    drift = math.radians(0.03) / DAY  # eastward, towards the edge at -4.75
    ev = plan_station_keeping(cfg, s, drift)
    assert [e.kind for e in ev] == ["EWSK_burn1", "EWSK_burn2"]
    assert ev[1].epoch - ev[0].epoch == pytest.approx(math.pi / s.mean_motion)
    # raising the orbit slows the eastward drift: both burns prograde
    assert ev[0].dv[1] > 0 and ev[0].dv == ev[1].dv
    # moving away from the edge needs no burn
    assert plan_station_keeping(cfg, s, -drift) == []


def test_drift_rate_cancels_libration():
    t = np.arange(0, 3 * DAY, 300.0)
    rate = 1e-9
    lon = rate * t + 1e-4 * np.sin(2 * math.pi * t / 86164.0905)
    assert drift_rate(t, lon) == pytest.approx(rate, rel=1e-2)
    assert drift_rate(t[:5], lon[:5]) == 0.0


def test_simulation_deterministic(short_truth):
    again = simulate_truth(SHORT)
    assert np.array_equal(again.states, short_truth.states)
    assert again.events == short_truth.events
    assert again.b_jumps == short_truth.b_jumps
    assert np.all(np.diff(short_truth.times) >= 0)


def test_no_jumps_with_infinite_rate():
    cfg = replace(SHORT, duration_days=1.0, b_jump_rate_days=math.inf)
    tr = simulate_truth(cfg, plan=False)
    assert tr.b_jumps == [] and tr.events == []
    assert np.all(tr.B == cfg.B0)


def test_ballistic_drift_leaves_slot():
    cfg = replace(SHORT, duration_days=2.0, drift0_deg_day=0.2)
    tr = simulate_truth(cfg, plan=False)
    lon0 = geo_mean_longitude(initial_state(cfg))
    lon1 = geo_mean_longitude(tr.state_at(tr.times[-1]))
    assert math.degrees(lon1 - lon0) == pytest.approx(0.4, abs=0.1)


def test_state_at_interpolates(short_truth):
    t = short_truth.times[10] + 100.0
    s = short_truth.state_at(t)
    assert s.epoch == t
    with pytest.raises(ValueError):
        short_truth.state_at(short_truth.times[0] - 1.0)


def test_noiseless_tracks_match_truth(short_truth):
    attrs = generate_tracks(short_truth, noiseless=True)
    assert len(attrs) >= 2
    for a in attrs:
        pos, vel = np.split(short_truth.cartesian_at(a.epoch), 2)
        rs, vs = a.site.inertial(a.epoch)
        z = observe(pos, vel, rs, vs)
        # without noise only the cubic truncation of the quadratic fit remains
        assert abs(a.alpha - z[0]) < 1e-9 and abs(a.delta - z[1]) < 1e-9
        assert abs(a.alpha_rate - z[2]) < 1e-9 and abs(a.delta_rate - z[3]) < 1e-9


def test_tracks_deterministic_and_spaced(short_truth):
    a = generate_tracks(short_truth)
    b = generate_tracks(short_truth)
    assert [x.z.tolist() for x in a] == [x.z.tolist() for x in b]
    assert np.all(np.diff([x.epoch for x in a]) >= 1800.0)
    assert generate_tracks(short_truth, seed=99) != a


def test_invisible_sensor_gives_no_tracks(short_truth):
    south_pole = SensorSite("pole", math.radians(-89.9), 0.0, 2.8)
    assert visibility_windows(short_truth, south_pole, 600.0) == []
    assert generate_tracks(short_truth, sensors=[south_pole]) == []
    assert math.isnan(mean_reobservation_days([]))


def test_truth_table_and_scoring():
    class A:
        def __init__(self, t):
            self.epoch = t

    class T:
        def maneuvers(self):
            return [(10.0, 10.0, "NSSK"), (20.0, 25.0, "EWSK"), (26.0, 26.0, "NSSK")]

    attrs = [A(t) for t in (5, 12, 15, 30, 40)]
    table = truth_maneuver_table(T(), attrs)
    assert [m.first_track for m in table] == [1, 3, 3]
    assert [m.detectable for m in table] == [True, False, True]
    res, rows = score_detections([1, 4, 0], table)
    assert res == {"correct": 1, "delayed": 1, "missed": 0, "false": 1}
    res, _ = score_detections([], table)
    assert res["missed"] == 2
    # correct + delayed + missed equals the detectable count
    assert sum(res[k] for k in ("correct", "delayed", "missed")) == 2


def test_empty_report(tmp_path):
    written = emit_reports(empty_report("SHF2", 7), tmp_path / "out")
    assert [p.split("/")[-1] for p in written] == ["summary.json"]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["detections"] == {"correct": 0, "delayed": 0, "false": 0}
    assert summary["seed"] == 7 and summary["n_tracks"] == 0


def test_run_rejects_unknown_method(short_truth):
    with pytest.raises(ValueError):
        run_end_to_end(SHORT, "UKF", truth=short_truth, attrs=[])


@pytest.mark.slow
def test_mhe2_detections_all_correct(tmp_path):
    cfg = ScenarioConfig(duration_days=12.0)
    rep = run_end_to_end(cfg, "MHE2", with_pcrb=False)
    detectable = sum(m.detectable for m in rep.truth_table)
    assert detectable >= 1
    assert rep.detections["correct"] == detectable
    assert rep.detections["delayed"] == rep.detections["false"] == rep.detections["missed"] == 0
    emit_reports(rep, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    n_promote = sum(1 for line in (tmp_path / "events.jsonl").read_text().splitlines()
                    if json.loads(line)["type"] == "promote")
    assert summary["detections"]["correct"] + summary["detections"]["delayed"] \
        + summary["detections"]["false"] == n_promote
