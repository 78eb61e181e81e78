import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shftrack.constants import GEO_PERIOD, GEO_RADIUS, MU_EARTH, SIDEREAL_DAY
from shftrack.orbits import (CartesianState, MeeState, OrbitDomainError, SingularityError,
                             aei, apply_impulse, cart_to_mee, circular_state, earth_rotation_angle,
                             geo_mean_longitude, kepler_propagate, mee_to_cart, mee_to_rv,
                             rv_to_mee, sensitivity_matrix, unwrap_to, wrap_angle)


def elliptic_states():
    return st.builds(
        lambda a, e, w, i, raan, L: _from_classical(a, e, w, i, raan, L),
        st.floats(7000, 80000), st.floats(0, 0.9), st.floats(0, 2 * math.pi),
        st.floats(0, math.radians(175)), st.floats(0, 2 * math.pi), st.floats(-10, 10))


def _from_classical(a, e, w, i, raan, L):
    p = a * (1 - e * e)
    t = math.tan(i / 2)
    return MeeState(p, e * math.cos(w + raan), e * math.sin(w + raan), t * math.cos(raan),
                    t * math.sin(raan), L)


def test_invariants_rejected():
    with pytest.raises(OrbitDomainError):
        MeeState(-1.0, 0, 0, 0, 0, 0)
    with pytest.raises(OrbitDomainError):
        MeeState(42000.0, 0.8, 0.7, 0, 0, 0)
    with pytest.raises(SingularityError):
        MeeState(42000.0, 0, 0, math.inf, 0, 0)


def test_circular_equatorial_conversion():
    a = 42164.17
    s = cart_to_mee(CartesianState([0, a, 0], [-math.sqrt(MU_EARTH / a), 0, 0]))
    assert s.p == pytest.approx(a, rel=1e-12)
    assert abs(s.f) < 1e-12 and abs(s.g) < 1e-12 and abs(s.h) < 1e-12 and abs(s.k) < 1e-12
    assert wrap_angle(s.L - math.pi / 2) == pytest.approx(0, abs=1e-12)


def test_mee_to_cart_reference():
    a = GEO_RADIUS
    c = mee_to_cart(circular_state(a))
    np.testing.assert_allclose(c.position, [a, 0, 0], atol=1e-9)
    np.testing.assert_allclose(c.velocity, [0, math.sqrt(MU_EARTH / a), 0], atol=1e-12)


def test_geo_radius():
    a = (MU_EARTH * GEO_PERIOD ** 2 / (4 * math.pi ** 2)) ** (1 / 3)
    assert a == pytest.approx(42164.17, abs=0.01)
    assert GEO_RADIUS == pytest.approx(a)


@given(elliptic_states())
def test_round_trip(s):
    c = mee_to_cart(s)
    back = mee_to_cart(cart_to_mee(c))
    scale = np.linalg.norm(c.position)
    np.testing.assert_allclose(back.position, c.position, atol=1e-9 * scale)
    np.testing.assert_allclose(back.velocity, c.velocity,
                               atol=1e-9 * np.linalg.norm(c.velocity))


@given(elliptic_states())
def test_L_periodicity(s):
    p0, v0 = mee_to_rv(s.as_array())
    x = s.as_array()
    x[5] += 2 * math.pi
    p1, v1 = mee_to_rv(x)
    np.testing.assert_allclose(p1, p0, atol=1e-8)
    np.testing.assert_allclose(v1, v0, atol=1e-12)


def test_hyperbolic_rejected():
    with pytest.raises(OrbitDomainError):
        rv_to_mee(np.array([42000.0, 0, 0]), np.array([0, 10.0, 0]))


def test_kepler_zero_and_period():
    s = circular_state(GEO_RADIUS, 0.1, 0.2, 0.3)
    assert kepler_propagate(s, 0.0) == s
    s1 = kepler_propagate(s, s.period)
    assert s1.L - s.L == pytest.approx(2 * math.pi, abs=1e-10)
    assert s1.as_array()[:5].tobytes() == s.as_array()[:5].tobytes()


def test_kepler_eccentric_half_period():
    from scipy.integrate import solve_ivp
    s = MeeState(20000 * (1 - 0.01), 0.1, 0.0, 0.1, 0.05, 0.0)
    half = kepler_propagate(s, s.period / 2)
    assert half.L == pytest.approx(math.pi, abs=1e-10)

    def rhs(t, y):
        r = y[:3]
        return np.concatenate([y[3:], -MU_EARTH * r / np.linalg.norm(r) ** 3])

    y0 = np.concatenate(mee_to_rv(s.as_array()))
    sol = solve_ivp(rhs, (0, s.period / 2), y0, method="DOP853", rtol=1e-13, atol=1e-10)
    x = rv_to_mee(sol.y[:3, -1], sol.y[3:, -1])
    assert wrap_angle(x[5] - half.L) == pytest.approx(0, abs=1e-8)


@given(st.floats(-5e5, 5e5))
def test_kepler_monotone(dt):
    s = MeeState(26000.0, 0.2, -0.1, 0.1, 0.0, 1.0)
    s1 = kepler_propagate(s, dt)
    assert (s1.L - s.L) * dt >= 0
    if abs(dt) > 1e-3:
        assert np.sign(s1.L - s.L) == np.sign(dt)
    np.testing.assert_array_equal(s1.as_array()[:5], s.as_array()[:5])


def test_sensitivity_radial_p_row_zero():
    A = sensitivity_matrix(circular_state(GEO_RADIUS))
    assert A[0, 0] == 0.0
    assert np.all(np.isfinite(A))


def _fd_columns(s, h=1e-7):
    cols = []
    for j in range(3):
        dv = np.zeros(3)
        dv[j] = h
        xp = apply_impulse(s, dv).as_array()
        xm = apply_impulse(s, -dv).as_array()
        cols.append((xp - xm) / (2 * h))
    return np.stack(cols, axis=1)


def test_sensitivity_tangential_fd():
    s = circular_state(GEO_RADIUS, 0.03, 1.0, 0.4)
    A = sensitivity_matrix(s)
    dv = 1e-6
    d = apply_impulse(s, [0, dv, 0]).as_array() - s.as_array()
    np.testing.assert_allclose(A[:, 1] * dv, d, rtol=1e-6, atol=1e-13)


def test_normal_burn_at_node():
    s = circular_state(GEO_RADIUS, 0.02, 0.7, 0.7)
    A = sensitivity_matrix(s)
    hk = np.hypot(A[3, 2], A[4, 2])
    assert np.all(np.abs(A[:3, 2]) < 1e-12 * hk)
    # at the node a normal burn changes inclination only: (h, k) moves along the node direction
    assert abs(A[3, 2] * math.sin(0.7) - A[4, 2] * math.cos(0.7)) < 1e-12 * hk
    d = apply_impulse(s, [0, 0, 1e-5]).as_array() - s.as_array()
    np.testing.assert_allclose(d[3:5], 1e-5 * A[3:5, 2], rtol=1e-4)
    assert abs(d[1]) < 1e-10 and abs(d[2]) < 1e-10


@given(elliptic_states().filter(lambda s: s.eccentricity < 0.7))
def test_sensitivity_fd_property(s):
    A = sensitivity_matrix(s)
    F = _fd_columns(s)
    big = np.abs(A) > 1e-6 * np.abs(A).max()
    np.testing.assert_allclose(A[big], F[big], rtol=1e-5)


def test_geo_longitude_greenwich_and_sidereal():
    t = 800 * 86400.0
    s = circular_state(GEO_RADIUS, 0.0, 0.0, float(earth_rotation_angle(t)), epoch=t)
    assert geo_mean_longitude(s) == pytest.approx(0.0, abs=1e-12)
    s2 = s.replace(epoch=t + SIDEREAL_DAY)
    assert wrap_angle(geo_mean_longitude(s2) - geo_mean_longitude(s)) == pytest.approx(0, abs=1e-6)


def test_aei_and_unwrap():
    s = _from_classical(30000.0, 0.3, 0.2, 0.4, 1.0, 2.0)
    np.testing.assert_allclose(aei(s.as_array()), [30000.0, 0.3, 0.4], rtol=1e-12)
    assert unwrap_to(0.1, 4 * math.pi) == pytest.approx(4 * math.pi + 0.1)


@given(st.floats(-100, 100))
def test_wrap_range(x):
    w = wrap_angle(x)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(x), abs_tol=1e-9)
