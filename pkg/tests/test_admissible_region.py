import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shftrack.admissible_region import (AdmissibleRegion, RegionThresholds, admissible_threshold,
                                        build_region, centroid, contains, control_cost,
                                        effective_pre_orbit, orthotope_bounds, points_to_mee,
                                        range_cost, region_grid, x_opt)
from shftrack.constants import ARCSEC, DAY
from shftrack.forces import ForceModelConfig
from shftrack.observation import measure, nominal_covariance, observe, range_and_rate
from shftrack.orbits import kepler_propagate, mee_to_cart, mee_to_rv

from synth import SITE, case

TH = RegionThresholds()


@pytest.fixture(scope="module")
def ew_case():
    return case("EW", np.random.default_rng(5))


@pytest.fixture(scope="module")
def ew_region(ew_case):
    pre, attr, truth, dv = ew_case
    return build_region(pre, attr, TH)


def test_threshold_examples():
    ms = 1e-3
    assert admissible_threshold(0.06e-3, RegionThresholds(10 * ms, 1 * ms, 3)) == 1 * ms
    assert admissible_threshold(5 * ms, RegionThresholds(10 * ms, 1 * ms, 3)) == 10 * ms
    assert admissible_threshold(1 * ms, RegionThresholds(15 * ms, 3 * ms, 3)) == 3 * ms
    with pytest.raises(ValueError):
        admissible_threshold(-1.0, TH)
    with pytest.raises(ValueError):
        RegionThresholds(1e-3, 2e-3, 3)
    with pytest.raises(ValueError):
        RegionThresholds(1e-2, 1e-3, 0.5)


@given(st.floats(0, 1), st.floats(0, 1))
def test_threshold_range_and_monotone(a, b):
    lo, hi = sorted((a, b))
    pa, pb = admissible_threshold(lo, TH), admissible_threshold(hi, TH)
    assert TH.p_min <= pa <= pb <= TH.p_max


def test_centroid_self_consistency():
    pre, _, _, _ = case("NS", np.random.default_rng(2))
    t = pre.epoch + 0.6 * DAY
    c = mee_to_cart(kepler_propagate(pre, t - pre.epoch))
    attr = measure(c, SITE, t).with_covariance(nominal_covariance(ARCSEC))
    cen = centroid(pre, attr)
    assert abs(cen.d_inclination) < 1e-8 and abs(cen.d_anomaly) < 1e-8
    assert cen.residual_norm < 0.01 * ARCSEC
    rho, rhod = range_and_rate(c, SITE, t)
    assert cen.rho == pytest.approx(rho, abs=1e-3)


def test_centroid_reproduces_attributable(ew_region):
    cen = ew_region.centroid
    attr = ew_region.attr
    rs, vs = attr.site.inertial(attr.epoch)
    pos, vel = mee_to_rv(cen.state.as_array())
    np.testing.assert_allclose(observe(pos, vel, rs, vs), attr.z, atol=1e-10, rtol=1e-10)


def test_centroid_bad_tof(ew_case):
    pre, attr, _, _ = ew_case
    with pytest.raises(ValueError):
        centroid(pre, attr, tof=-1.0)


def test_region_invariants(ew_region):
    r = ew_region
    assert TH.p_min <= r.p_adm <= TH.p_max
    c = r.center
    assert np.all(r.bounds[:, 0] <= c) and np.all(c <= r.bounds[:, 1])
    assert contains(r, r.attr.z, r.centroid.rho, r.centroid.rho_rate)
    for d in range(6):
        pt = c.copy()
        pt[d] = r.bounds[d, 1] + 1e-9 * max(1.0, abs(r.bounds[d, 1]))
        assert not contains(r, pt[:4], pt[4], pt[5])
    sig = np.sqrt(np.diag(r.attr.covariance))
    np.testing.assert_allclose(r.widths[:4], 6 * sig)


def test_bisection_contract(ew_region):
    r = ew_region
    for j, (lo, hi) in enumerate(r.bounds[4:]):
        for end, capped in ((lo, r.unbounded[2 * j]), (hi, r.unbounded[2 * j + 1])):
            if capped:
                continue
            args = (end, r.centroid.rho_rate) if j == 0 else (r.centroid.rho, end)
            P = range_cost(r.pre_orbit, r.attr, r.tof, *args)[0]
            assert abs(P - r.p_adm) <= 1e-3 * r.p_adm


def test_bounds_monotone_in_p_max(ew_case, ew_region):
    pre, attr, _, _ = ew_case
    wider = orthotope_bounds(ew_region.centroid, attr, ew_region.pre_orbit, ew_region.tof,
                             RegionThresholds(10e-3, 2e-3, 3))
    assert np.all(wider.bounds[:, 0] <= ew_region.bounds[:, 0] + 1e-12)
    assert np.all(wider.bounds[:, 1] >= ew_region.bounds[:, 1] - 1e-12)


def test_huge_threshold_hits_caps(ew_case, ew_region):
    r = orthotope_bounds(ew_region.centroid, ew_case[1], ew_region.pre_orbit, ew_region.tof,
                         RegionThresholds(10.0, 10.0, 3))
    assert any(r.unbounded)


def test_x_opt_ordering_and_grid(ew_region):
    r = ew_region
    rho, rhod, p = x_opt(r.pre_orbit, r.attr, r.tof, region=r, grid=11)
    assert p <= r.p_centroid + 1e-12
    R, V, P = region_grid(r, 11)
    assert p <= P.min() + 1e-15
    corners = [(a, b) for a in r.bounds[4] for b in r.bounds[5]]
    Pc = [range_cost(r.pre_orbit, r.attr, r.tof, a, b)[0] for a, b in corners]
    assert r.p_centroid <= min(Pc)


def test_x_opt_unmaneuvered():
    pre, _, _, _ = case("NS", np.random.default_rng(9))
    t = pre.epoch + 0.7 * DAY
    c = mee_to_cart(kepler_propagate(pre, t - pre.epoch))
    attr = measure(c, SITE, t).with_covariance(nominal_covariance(ARCSEC))
    rho, rhod = range_and_rate(c, SITE, t)
    _, _, p = x_opt(pre, attr, t - pre.epoch, center=(rho, rhod), grid=11, zoom_rounds=4)
    assert p <= 1e-6
    with pytest.raises(ValueError):
        x_opt(pre, attr, t - pre.epoch)


def test_box_samples_mostly_admissible():
    admissible = []
    for seed in range(5, 9):
        for kind in ("EW", "NS"):
            pre, attr, _, _ = case(kind, np.random.default_rng(seed))
            r = build_region(pre, attr, TH)
            pts = r.bounds[:, 0] + r.widths * np.random.default_rng(0).random((200, 6))
            admissible.append(control_cost(r.pre_orbit, r.attr, r.tof, pts) <= r.p_adm)
    assert np.mean(admissible) > 0.5


def test_points_to_mee_round_trip(ew_region):
    r = ew_region
    x = points_to_mee(r.center[None], r.attr)[0]
    np.testing.assert_allclose(x[:5], r.centroid.state.as_array()[:5], rtol=1e-9, atol=1e-12)


def test_effective_pre_orbit():
    pre, _, _, _ = case("EW", np.random.default_rng(3))
    cfg = ForceModelConfig(zonal_degree=2)
    eff = effective_pre_orbit(pre, DAY, cfg)
    from shftrack.propagation import perturbed_propagate
    target = perturbed_propagate(pre, DAY, cfg).as_array()
    np.testing.assert_allclose(kepler_propagate(eff, DAY).as_array(), target, rtol=1e-12)
    assert effective_pre_orbit(pre, DAY) is pre


def test_region_rejects_bad_bounds(ew_region):
    b = ew_region.bounds.copy()
    b[0] = b[0][::-1]
    with pytest.raises(ValueError):
        AdmissibleRegion(ew_region.attr, ew_region.pre_orbit, ew_region.tof, ew_region.centroid,
                         ew_region.p_centroid, ew_region.p_adm, b)
