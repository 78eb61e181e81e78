"""Optical sensor geometry: attributables, measurement function, inverse map."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import OMEGA_EARTH, R_EARTH
from .orbits import CartesianState, earth_rotation_angle, wrap_angle

WGS84_F = 1.0 / 298.257223563


class GeometryError(ValueError):
    """Degenerate observation geometry (object at the observer)."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSite:
    name: str
    latitude: float
    longitude: float
    altitude: float = 0.0
    elevation_mask: float = math.radians(20.0)
    noise_sigma: float = math.radians(1.0 / 3600.0)

    def __post_init__(self):
        if abs(self.latitude) > math.pi / 2:
            raise ValueError("latitude outside [-pi/2, pi/2]")
        if not 0.0 <= self.elevation_mask < math.pi / 2:
            raise ValueError("elevation mask outside [0, pi/2)")

    def ecef(self) -> np.ndarray:
        e2 = WGS84_F * (2.0 - WGS84_F)
        sphi, cphi = math.sin(self.latitude), math.cos(self.latitude)
        N = R_EARTH / math.sqrt(1.0 - e2 * sphi * sphi)
        return np.array([
            (N + self.altitude) * cphi * math.cos(self.longitude),
            (N + self.altitude) * cphi * math.sin(self.longitude),
            (N * (1.0 - e2) + self.altitude) * sphi,
        ])

    def up_ecef(self) -> np.ndarray:
        c = math.cos(self.latitude)
        return np.array([c * math.cos(self.longitude), c * math.sin(self.longitude),
                         math.sin(self.latitude)])

    def inertial(self, epoch: float):
        """Site position and velocity in the inertial frame at ``epoch``."""
        th = float(earth_rotation_angle(epoch))
        c, s = math.cos(th), math.sin(th)
        x, y, z = self.ecef()
        pos = np.array([c * x - s * y, s * x + c * y, z])
        vel = OMEGA_EARTH * np.array([-pos[1], pos[0], 0.0])
        return pos, vel

    def up(self, epoch: float) -> np.ndarray:
        th = float(earth_rotation_angle(epoch))
        c, s = math.cos(th), math.sin(th)
        u = self.up_ecef()
        return np.array([c * u[0] - s * u[1], s * u[0] + c * u[1], u[2]])


@dataclass(frozen=True)
class Attributable:
    alpha: float
    delta: float
    alpha_rate: float
    delta_rate: float
    epoch: float
    site: SensorSite
    covariance: np.ndarray | None = None

    def __post_init__(self):
        if not -math.pi / 2 <= self.delta <= math.pi / 2:
            raise ValueError("declination outside [-pi/2, pi/2]")
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=float).reshape(4, 4)
            cov = 0.5 * (cov + cov.T)
            np.linalg.cholesky(cov)  # raises LinAlgError unless SPD
            object.__setattr__(self, "covariance", cov)

    @property
    def z(self) -> np.ndarray:
        return np.array([self.alpha, self.delta, self.alpha_rate, self.delta_rate])

    def with_covariance(self, cov) -> "Attributable":
        return Attributable(self.alpha, self.delta, self.alpha_rate, self.delta_rate,
                            self.epoch, self.site, cov)

    @classmethod
    def from_vector(cls, z, epoch, site, covariance=None) -> "Attributable":
        z = np.asarray(z, dtype=float)
        return cls(float(z[0]), float(z[1]), float(z[2]), float(z[3]), epoch, site, covariance)


@dataclass(frozen=True)
class Track:
    epochs: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    site: SensorSite

    def __post_init__(self):
        for name in ("epochs", "alpha", "delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (len(self.epochs) == len(self.alpha) == len(self.delta)):
            raise ValueError("track arrays differ in length")
        if len(self.epochs) < 3:
            raise InsufficientDataError("a track needs at least 3 points")
        if np.any(np.diff(self.epochs) <= 0):
            raise ValueError("track epochs must be strictly increasing")


def los(z):
    """Unit line of sight and its time derivative for ``(..., 4)`` attributable vectors."""
    z = np.asarray(z, dtype=float)
    a, d, ad, dd = (z[..., i] for i in range(4))
    ca, sa, cd, sd = np.cos(a), np.sin(a), np.cos(d), np.sin(d)
    w = np.stack([ca * cd, sa * cd, sd], axis=-1)
    wdot = (ad[..., None] * np.stack([-sa * cd, ca * cd, np.zeros_like(a)], axis=-1)
            + dd[..., None] * np.stack([-ca * sd, -sa * sd, cd], axis=-1))
    return w, wdot


def line_of_sight(attr: Attributable):
    return los(attr.z)


def observe(pos, vel, site_pos, site_vel):
    """Topocentric (alpha, delta, alpha_rate, delta_rate) for ``(..., 3)`` states."""
    rho = np.asarray(pos) - site_pos
    rhod = np.asarray(vel) - site_vel
    x, y, zc = rho[..., 0], rho[..., 1], rho[..., 2]
    xy2 = x * x + y * y
    rn = np.sqrt(xy2 + zc * zc)
    if np.any(rn == 0.0):
        raise GeometryError("object coincides with the observing site")
    alpha = np.mod(np.arctan2(y, x), 2.0 * np.pi)
    delta = np.arcsin(zc / rn)
    alpha_rate = (x * rhod[..., 1] - y * rhod[..., 0]) / xy2
    rr = np.sum(rho * rhod, axis=-1) / rn
    delta_rate = (rhod[..., 2] - rr * zc / rn) / np.sqrt(xy2)
    return np.stack([alpha, delta, alpha_rate, delta_rate], axis=-1)


def observe_with_range(pos, vel, site_pos, site_vel):
    rho = np.asarray(pos) - site_pos
    rhod = np.asarray(vel) - site_vel
    rn = np.linalg.norm(rho, axis=-1)
    return observe(pos, vel, site_pos, site_vel), rn, np.sum(rho * rhod, axis=-1) / rn


def measure(state: CartesianState, site: SensorSite, epoch: float) -> Attributable:
    """Noise-free attributable of ``state`` seen from ``site`` (state taken at ``epoch``)."""
    rs, vs = site.inertial(epoch)
    return Attributable.from_vector(observe(state.position, state.velocity, rs, vs), epoch, site)


def range_and_rate(state: CartesianState, site: SensorSite, epoch: float):
    rs, vs = site.inertial(epoch)
    _, rho, rhod = observe_with_range(state.position, state.velocity, rs, vs)
    return float(rho), float(rhod)


def states_from_range(z, rho, rho_rate, site_pos, site_vel):
    """Vectorized inverse map: positions/velocities from observables plus (rho, rho_rate)."""
    w, wd = los(z)
    rho = np.asarray(rho, dtype=float)[..., None]
    rhod = np.asarray(rho_rate, dtype=float)[..., None]
    return site_pos + rho * w, site_vel + rho * wd + rhod * w


def state_from_range(attr: Attributable, rho: float, rho_rate: float,
                     srp_coeff: float = 0.0) -> CartesianState:
    if not rho > 0:
        raise ValueError("range must be positive")
    rs, vs = attr.site.inertial(attr.epoch)
    pos, vel = states_from_range(attr.z, rho, rho_rate, rs, vs)
    return CartesianState(pos, vel, srp_coeff=srp_coeff, epoch=attr.epoch)


def residual(z_obs, z_pred):
    """Observed minus predicted with the right-ascension difference wrapped."""
    r = np.asarray(z_obs, dtype=float) - np.asarray(z_pred, dtype=float)
    r[..., 0] = wrap_angle(r[..., 0])
    return r


def _polyfit_at_zero(t, y, degree: int):
    X = np.vander(t, degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    cov = np.linalg.inv(X.T @ X)
    return coef[:2], cov[:2, :2]


def nominal_covariance(sigma: float, length: float = 300.0, n_points: int = 10,
                       degree: int = 2) -> np.ndarray:
    """Attributable covariance of an evenly sampled track with per-point noise ``sigma``."""
    t = np.linspace(-length / 2, length / 2, n_points)
    X = np.vander(t, degree + 1, increasing=True)
    c = np.linalg.inv(X.T @ X)[:2, :2] * sigma * sigma
    cov = np.zeros((4, 4))
    cov[np.ix_([0, 2], [0, 2])] = c
    cov[np.ix_([1, 3], [1, 3])] = c
    return cov


def attributable_from_track(track: Track, degree: int = 2,
                            sigma: float | None = None) -> Attributable:
    """Least-squares attributable at the mean epoch of ``track``.

    Right ascension and declination are fit independently with polynomials of
    ``degree`` in time about the mean epoch; value and slope of each fit give
    the attributable and the OLS covariance, scaled by the per-point variance,
    gives its covariance.
    """
    n = len(track.epochs)
    if n < 3:
        raise InsufficientDataError("a track needs at least 3 points")
    if n < degree + 1:
        raise InsufficientDataError(f"{n} points cannot support a degree-{degree} fit")
    sigma = track.site.noise_sigma if sigma is None else sigma
    t_mean = float(np.mean(track.epochs))
    t = track.epochs - t_mean
    alpha = np.unwrap(track.alpha)
    (a0, a1), ca = _polyfit_at_zero(t, alpha, degree)
    (d0, d1), cd = _polyfit_at_zero(t, track.delta, degree)
    cov = np.zeros((4, 4))
    cov[np.ix_([0, 2], [0, 2])] = ca
    cov[np.ix_([1, 3], [1, 3])] = cd
    cov *= sigma * sigma
    return Attributable(float(np.mod(a0, 2 * np.pi)), float(d0), float(a1), float(d1), t_mean,
                        track.site, cov)


def elevation(pos, site: SensorSite, epoch: float):
    rs, _ = site.inertial(epoch)
    rho = np.asarray(pos) - rs
    return np.arcsin(np.sum(rho * site.up(epoch), axis=-1) / np.linalg.norm(rho, axis=-1))


def in_cylindrical_shadow(pos, sun_position) -> bool:
    s_hat = sun_position / np.linalg.norm(sun_position)
    along = float(np.dot(pos, s_hat))
    perp = np.linalg.norm(pos - along * s_hat)
    return along < 0.0 and perp < R_EARTH


def phase_angle(pos, site_pos, sun_position) -> float:
    to_sun = sun_position - pos
    to_obs = site_pos - pos
    c = np.dot(to_sun, to_obs) / (np.linalg.norm(to_sun) * np.linalg.norm(to_obs))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


SITE_DARKNESS = math.radians(-10.0)


def visibility(state: CartesianState, site: SensorSite, sun_position, epoch: float) -> bool:
    """Optical visibility: above mask, phase <= 90 deg, sunlit object, dark site."""
    pos = state.position
    if float(elevation(pos, site, epoch)) <= site.elevation_mask:
        return False
    rs, _ = site.inertial(epoch)
    if phase_angle(pos, rs, sun_position) > math.pi / 2:
        return False
    if in_cylindrical_shadow(pos, sun_position):
        return False
    sun_el = math.asin(np.dot((sun_position - rs) / np.linalg.norm(sun_position - rs),
                              site.up(epoch)))
    return sun_el < SITE_DARKNESS


# ---------------------------------------------------------------------------
# CSV interchange

ATTR_FIELDS = (["epoch_s", "alpha_rad", "delta_rad", "alpha_rate_rad_s", "delta_rate_rad_s", "site"]
               + [f"cov_{i}{j}" for i in range(4) for j in range(4)])


def write_attributables(path, attrs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ATTR_FIELDS)
        for a in attrs:
            cov = a.covariance if a.covariance is not None else np.zeros((4, 4))
            w.writerow([repr(a.epoch), repr(a.alpha), repr(a.delta), repr(a.alpha_rate),
                        repr(a.delta_rate), a.site.name] + [repr(float(c)) for c in cov.ravel()])


def read_attributables(path, sites: dict) -> list:
    """Load attributables; covariance may be full (16 columns) or upper triangle only."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cov = np.zeros((4, 4))
            for i in range(4):
                for j in range(4):
                    v = row.get(f"cov_{i}{j}")
                    if v not in (None, ""):
                        cov[i, j] = float(v)
            upper = np.triu(cov)
            lower_empty = not np.any(np.tril(cov, -1))
            cov = upper + np.triu(cov, 1).T if lower_empty else 0.5 * (cov + cov.T)
            out.append(Attributable(float(row["alpha_rad"]), float(row["delta_rad"]),
                                    float(row["alpha_rate_rad_s"]), float(row["delta_rate_rad_s"]),
                                    float(row["epoch_s"]), sites[row["site"]], cov))
    return out
