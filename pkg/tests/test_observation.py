import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from shftrack.constants import ARCSEC, GEO_RADIUS, R_EARTH
from shftrack.forces import sun_position
from shftrack.observation import (Attributable, GeometryError, InsufficientDataError, SensorSite,
                                  Track, attributable_from_track, elevation, line_of_sight,
                                  measure, nominal_covariance, observe, range_and_rate,
                                  read_attributables, residual, state_from_range, visibility,
                                  write_attributables)
from shftrack.orbits import CartesianState, circular_state, kepler_propagate, mee_to_cart

from conftest import geo_state


def test_site_validation():
    with pytest.raises(ValueError):
        SensorSite("x", 2.0, 0.0)
    with pytest.raises(ValueError):
        SensorSite("x", 0.0, 0.0, 0.0, math.pi / 2)


def test_attributable_validation(zimmerwald):
    with pytest.raises(ValueError):
        Attributable(0.0, 2.0, 0.0, 0.0, 0.0, zimmerwald)
    with pytest.raises(np.linalg.LinAlgError):
        Attributable(0.0, 0.0, 0.0, 0.0, 0.0, zimmerwald, -np.eye(4))


def test_los_references(zimmerwald):
    w, wd = line_of_sight(Attributable(0.0, 0.0, 0.0, 0.0, 0.0, zimmerwald))
    np.testing.assert_allclose(w, [1, 0, 0])
    om = 7e-5
    w, wd = line_of_sight(Attributable(math.pi / 2, 0.0, om, 0.0, 0.0, zimmerwald))
    np.testing.assert_allclose(wd, [-om, 0, 0], atol=1e-18)


@given(st.floats(0, 2 * math.pi), st.floats(-1.5, 1.5), st.floats(-1e-3, 1e-3),
       st.floats(-1e-3, 1e-3))
def test_los_properties(a, d, ad, dd):
    from shftrack.observation import los
    w, wd = los(np.array([a, d, ad, dd]))
    assert np.linalg.norm(w) == pytest.approx(1.0, abs=1e-15)
    assert abs(w @ wd) < 1e-12
    h = 1e-3
    w2, _ = los(np.array([a + ad * h, d + dd * h, ad, dd]))
    w1, _ = los(np.array([a - ad * h, d - dd * h, ad, dd]))
    np.testing.assert_allclose((w2 - w1) / (2 * h), wd, atol=1e-9)


def test_zenith_object(zimmerwald):
    t = 1000.0
    rs, vs = zimmerwald.inertial(t)
    up = zimmerwald.up(t)
    a = measure(CartesianState(rs + 1000.0 * up, vs), zimmerwald, t)
    w, _ = line_of_sight(a)
    np.testing.assert_allclose(w, up, atol=1e-12)
    assert abs(a.alpha_rate) < 1e-15 and abs(a.delta_rate) < 1e-15


def test_degenerate_geometry(zimmerwald):
    rs, vs = zimmerwald.inertial(0.0)
    with pytest.raises(GeometryError):
        measure(CartesianState(rs, vs), zimmerwald, 0.0)
    with pytest.raises(ValueError):
        state_from_range(Attributable(0, 0, 0, 0, 0, zimmerwald), 0.0, 0.0)


@given(st.floats(0, 2 * math.pi), st.floats(0, 0.1), st.floats(0, 2 * math.pi),
       st.floats(0, 1e7))
def test_measure_round_trip(L, inc, raan, t):
    site = SensorSite("s", 0.8, 0.1, 0.5)
    c = mee_to_cart(circular_state(GEO_RADIUS * 1.001, inc, raan, L))
    a = measure(c, site, t)
    rho, rhod = range_and_rate(c, site, t)
    back = state_from_range(a, rho, rhod)
    np.testing.assert_allclose(back.position, c.position, rtol=1e-9, atol=1e-9 * GEO_RADIUS)
    np.testing.assert_allclose(back.velocity, c.velocity, atol=1e-9 * 3.07)


def test_state_from_range_formula(zimmerwald):
    a = Attributable(0.3, 0.2, 0.0, 0.0, 50.0, zimmerwald)
    rs, vs = zimmerwald.inertial(50.0)
    s = state_from_range(a, 40000.0, 0.0)
    w, _ = line_of_sight(a)
    assert np.max(np.abs(s.position - (rs + 40000.0 * w))) < 1e-12 * 1e5
    np.testing.assert_array_equal(s.velocity, vs)


def test_parallax_sign():
    c = mee_to_cart(geo_state(lon_deg=0.0, inc_deg=0.0, epoch=0.0))
    north = SensorSite("n", math.radians(45), 0.0)
    south = SensorSite("s", math.radians(-45), 0.0)
    # a northern observer sees an equatorial object further south
    assert measure(c, north, 0.0).delta < measure(c, south, 0.0).delta


def _track(site, alpha_fn, delta_fn, T, n, sigma=0.0, rng=None):
    t = np.linspace(0, T, n) + 1e5
    noise = rng.standard_normal((2, n)) * sigma if rng is not None else np.zeros((2, n))
    return Track(t, alpha_fn(t) + noise[0], delta_fn(t) + noise[1], site)


def test_linear_track_exact(zimmerwald):
    tr = _track(zimmerwald, lambda t: 1.0 + 1e-5 * (t - 1e5), lambda t: 0.1 - 2e-6 * (t - 1e5),
                300.0, 10)
    a = attributable_from_track(tr, degree=1, sigma=ARCSEC)
    assert a.epoch == pytest.approx(1e5 + 150.0)
    assert a.alpha == pytest.approx(1.0 + 1.5e-3, abs=1e-12)
    assert a.alpha_rate == pytest.approx(1e-5, rel=1e-9)
    assert a.delta_rate == pytest.approx(-2e-6, rel=1e-9)
    b = attributable_from_track(tr, degree=1, sigma=2 * ARCSEC)
    np.testing.assert_allclose(b.covariance, 4 * a.covariance)


def test_slope_variance_formula(zimmerwald):
    n, T = 60, 360.0
    tr = _track(zimmerwald, lambda t: 0 * t + 1.0, lambda t: 0 * t, T, n)
    a = attributable_from_track(tr, degree=1, sigma=ARCSEC)
    expected = ARCSEC * math.sqrt(12.0 / (n * T ** 2))
    assert math.sqrt(a.covariance[2, 2]) == pytest.approx(expected, rel=0.05)
    b = attributable_from_track(_track(zimmerwald, lambda t: 0 * t + 1.0, lambda t: 0 * t,
                                       2 * T, n), degree=1, sigma=ARCSEC)
    assert a.covariance[2, 2] / b.covariance[2, 2] == pytest.approx(4.0, rel=0.05)


def test_insufficient_points(zimmerwald):
    with pytest.raises(InsufficientDataError):
        Track([0.0, 1.0], [0.0, 0.0], [0.0, 0.0], zimmerwald)
    tr = Track([0.0, 1.0, 2.0], [0.0] * 3, [0.0] * 3, zimmerwald)
    with pytest.raises(InsufficientDataError):
        attributable_from_track(tr, degree=3)


@given(st.integers(3, 20), st.floats(60, 900))
def test_covariance_spd(n, T):
    site = SensorSite("s", 0.5, 0.0)
    tr = Track(np.linspace(0, T, n), np.zeros(n), np.zeros(n), site)
    np.linalg.cholesky(attributable_from_track(tr).covariance)


def test_nominal_covariance_matches_track(zimmerwald):
    tr = Track(np.linspace(-150, 150, 10), np.zeros(10), np.zeros(10), zimmerwald)
    np.testing.assert_allclose(attributable_from_track(tr).covariance,
                               nominal_covariance(zimmerwald.noise_sigma), rtol=1e-10, atol=1e-25)


def test_noisy_attributables_chi2(zimmerwald):
    rng = np.random.default_rng(3)
    s0 = geo_state(epoch=0.0)
    d2 = []
    for _ in range(1000):
        t = rng.uniform(0, 86400.0) + np.linspace(0, rng.uniform(120, 600), 10)
        zs = []
        for ti in t:
            c = mee_to_cart(kepler_propagate(s0, ti))
            rs, vs = zimmerwald.inertial(ti)
            zs.append(observe(c.position, c.velocity, rs, vs))
        zs = np.array(zs)
        tr = Track(t, zs[:, 0] + rng.normal(0, ARCSEC, 10), zs[:, 1] + rng.normal(0, ARCSEC, 10),
                   zimmerwald)
        a = attributable_from_track(tr)
        c = mee_to_cart(kepler_propagate(s0, a.epoch))
        truth = measure(c, zimmerwald, a.epoch).z
        r = residual(a.z, truth)
        d2.append(r @ np.linalg.solve(a.covariance, r))
    assert stats.kstest(d2, stats.chi2(4).cdf).pvalue > 0.01


def test_visibility_rules(zimmerwald):
    t = 800 * 86400.0
    sun = sun_position(t)
    rs, _ = zimmerwald.inertial(t)
    # below the horizon: opposite side of the Earth
    c = CartesianState(-rs / np.linalg.norm(rs) * GEO_RADIUS, np.zeros(3))
    assert not visibility(c, zimmerwald, sun, t)
    # anti-sun axis inside the Earth's shadow cylinder
    u = sun / np.linalg.norm(sun)
    c = CartesianState(-u * GEO_RADIUS, np.zeros(3))
    assert not visibility(c, zimmerwald, sun, t)


def test_visibility_requires_dark_site(zimmerwald):
    # scan one day: whenever visible, the object is above the mask and the site is dark
    s0 = geo_state(epoch=800 * 86400.0)
    seen = 0
    for dt in np.arange(0, 86400.0, 900.0):
        t = s0.epoch + dt
        c = mee_to_cart(kepler_propagate(s0, dt))
        if visibility(c, zimmerwald, sun_position(t), t):
            seen += 1
            assert float(elevation(c.position, zimmerwald, t)) > zimmerwald.elevation_mask
    assert seen > 0


def test_csv_round_trip(tmp_path, zimmerwald):
    cov = nominal_covariance(ARCSEC)
    a = Attributable(1.0, 0.1, 7e-5, 1e-7, 123.0, zimmerwald, cov)
    p = tmp_path / "a.csv"
    write_attributables(p, [a])
    b = read_attributables(p, {"zimmerwald": zimmerwald})[0]
    np.testing.assert_array_equal(b.z, a.z)
    np.testing.assert_allclose(b.covariance, cov)
