"""Orbital state types, element conversions and Keplerian motion.

The heavy lifting is done by array functions operating on ``(..., 6)``
element arrays ``(p, f, g, h, k, L)`` so that whole particle populations
can be converted or propagated at once. The dataclasses are thin, validated
wrappers used at API boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import ERA_J2000, MU_EARTH, OMEGA_EARTH, R_EARTH


class OrbitError(ValueError):
    """Base class for invalid orbital states."""


class OrbitDomainError(OrbitError):
    """Non-elliptic (parabolic or hyperbolic) orbit."""


class SingularityError(OrbitError):
    """Retrograde equatorial orbit, where equinoctial elements are singular."""


# sqrt(h^2 + k^2) = tan(i/2); i within 1e-9 rad of pi is rejected
_HK_LIMIT = math.tan((math.pi - 1e-9) / 2.0)


def wrap_angle(x):
    """Wrap angle(s) to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return float(y) if np.ndim(y) == 0 else y


@dataclass(frozen=True)
class CartesianState:
    position: np.ndarray
    velocity: np.ndarray
    srp_coeff: float = 0.0
    epoch: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        if self.srp_coeff < 0:
            raise OrbitError(f"negative SRP coefficient {self.srp_coeff}")

    @property
    def rv(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class MeeState:
    p: float
    f: float
    g: float
    h: float
    k: float
    L: float
    srp_coeff: float = 0.0
    epoch: float = 0.0

    def __post_init__(self):
        if not self.p > 0:
            raise OrbitDomainError(f"semi-latus rectum must be positive, got {self.p}")
        if self.f * self.f + self.g * self.g >= 1.0:
            raise OrbitDomainError("f^2 + g^2 >= 1: orbit is not elliptic")
        hk = math.hypot(self.h, self.k)
        if not math.isfinite(hk) or hk > _HK_LIMIT:
            raise SingularityError("retrograde equatorial orbit (i = pi)")
        if self.srp_coeff < 0:
            raise OrbitError(f"negative SRP coefficient {self.srp_coeff}")

    @classmethod
    def from_array(cls, x, srp_coeff: float = 0.0, epoch: float = 0.0) -> "MeeState":
        x = np.asarray(x, dtype=float)
        if x.shape[-1] == 7:
            srp_coeff = float(x[6])
        return cls(*(float(v) for v in x[:6]), srp_coeff=srp_coeff, epoch=epoch)

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.f, self.g, self.h, self.k, self.L])

    def with_B(self) -> np.ndarray:
        return np.array([self.p, self.f, self.g, self.h, self.k, self.L, self.srp_coeff])

    @property
    def eccentricity(self) -> float:
        return math.hypot(self.f, self.g)

    @property
    def inclination(self) -> float:
        return 2.0 * math.atan(math.hypot(self.h, self.k))

    @property
    def raan(self) -> float:
        return math.atan2(self.k, self.h)

    @property
    def sma(self) -> float:
        return self.p / (1.0 - self.f**2 - self.g**2)

    @property
    def mean_motion(self) -> float:
        return math.sqrt(MU_EARTH / self.sma**3)

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.mean_motion

    def replace(self, **kw) -> "MeeState":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# array kernels


def mee_to_rv(x, mu: float = MU_EARTH):
    """Position and velocity arrays from ``(..., 6)`` MEE arrays."""
    x = np.asarray(x, dtype=float)
    p, f, g, h, k, L = (x[..., i] for i in range(6))
    cL, sL = np.cos(L), np.sin(L)
    a2 = h * h - k * k
    s2 = 1.0 + h * h + k * k
    w = 1.0 + f * cL + g * sL
    r = p / w
    hk2 = 2.0 * h * k
    pos = np.stack(
        [
            r / s2 * (cL + a2 * cL + hk2 * sL),
            r / s2 * (sL - a2 * sL + hk2 * cL),
            r / s2 * 2.0 * (h * sL - k * cL),
        ],
        axis=-1,
    )
    c = -np.sqrt(mu / p) / s2
    vel = np.stack(
        [
            c * (sL + a2 * sL - hk2 * cL + g - 2.0 * f * h * k + a2 * g),
            c * (-cL + a2 * cL + hk2 * sL - f + 2.0 * g * h * k + a2 * f),
            c * (-2.0) * (h * cL + k * sL + f * h + g * k),
        ],
        axis=-1,
    )
    return pos, vel


def rv_to_mee(pos, vel, mu: float = MU_EARTH, check: bool = True):
    """MEE arrays ``(..., 6)`` from position/velocity; L wrapped to (-pi, pi]."""
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    hvec = np.cross(pos, vel)
    hmag = np.linalg.norm(hvec, axis=-1)
    rmag = np.linalg.norm(pos, axis=-1)
    if check:
        energy = 0.5 * np.sum(vel * vel, axis=-1) - mu / rmag
        if np.any(energy >= 0.0):
            raise OrbitDomainError("non-elliptic orbit (specific energy >= 0)")
        cosi = hvec[..., 2] / hmag
        if np.any(cosi <= math.cos(math.pi - 1e-9)):
            raise SingularityError("retrograde equatorial orbit (i = pi)")
    p = hmag * hmag / mu
    denom = hmag + hvec[..., 2]
    k = hvec[..., 0] / denom
    h = -hvec[..., 1] / denom
    s2 = 1.0 + h * h + k * k
    fhat = np.stack([1.0 - k * k + h * h, 2.0 * k * h, -2.0 * k], axis=-1) / s2[..., None]
    ghat = np.stack([2.0 * k * h, 1.0 + k * k - h * h, 2.0 * h], axis=-1) / s2[..., None]
    evec = np.cross(vel, hvec) / mu - pos / rmag[..., None]
    f = np.sum(evec * fhat, axis=-1)
    g = np.sum(evec * ghat, axis=-1)
    if check and np.any(f * f + g * g >= 1.0):
        raise OrbitDomainError("non-elliptic orbit (e >= 1)")
    L = np.arctan2(np.sum(pos * ghat, axis=-1), np.sum(pos * fhat, axis=-1))
    return np.stack([p, f, g, h, k, L], axis=-1)


def aei(x):
    """Osculating (a, e, i) of MEE arrays ``(..., 6)``."""
    x = np.asarray(x, dtype=float)
    p, f, g, h, k = (x[..., j] for j in range(5))
    e2 = f * f + g * g
    return np.stack([p / (1.0 - e2), np.sqrt(e2), 2.0 * np.arctan(np.hypot(h, k))], axis=-1)


def unwrap_to(L, ref):
    """Shift angle(s) ``L`` by multiples of 2 pi to lie within pi of ``ref``."""
    return ref + wrap_angle(np.asarray(L) - ref)


def _solve_kepler(M, e, tol: float = 1e-15, maxiter: int = 50):
    M = np.asarray(M, dtype=float)
    e = np.asarray(e, dtype=float)
    E = np.where(e < 0.8, M, np.pi * np.sign(M))
    for _ in range(maxiter):
        fE = E - e * np.sin(E) - M
        dE = fE / (1.0 - e * np.cos(E))
        E = E - dE
        if np.all(np.abs(dE) < tol):
            break
    return E


def mean_longitude(x):
    """Unwrapped mean longitude consistent with the (unwrapped) true longitude."""
    x = np.asarray(x, dtype=float)
    f, g, L = x[..., 1], x[..., 2], x[..., 5]
    e = np.hypot(f, g)
    varpi = np.arctan2(g, f)
    theta = L - varpi
    E = np.arctan2(np.sqrt(1.0 - e * e) * np.sin(theta), e + np.cos(theta))
    M = E - e * np.sin(E)
    return L + wrap_angle(M - theta)


def true_longitude(lam, f, g):
    """Unwrapped true longitude from an unwrapped mean longitude."""
    lam = np.asarray(lam, dtype=float)
    e = np.hypot(f, g)
    varpi = np.arctan2(g, f)
    M = wrap_angle(lam - varpi)
    E = _solve_kepler(M, e)
    theta = np.arctan2(np.sqrt(1.0 - e * e) * np.sin(E), np.cos(E) - e)
    return lam + wrap_angle(theta - M)


def mean_motion(x):
    x = np.asarray(x, dtype=float)
    a = x[..., 0] / (1.0 - x[..., 1] ** 2 - x[..., 2] ** 2)
    return np.sqrt(MU_EARTH / a**3)


def kepler_advance(x, dt):
    """Advance ``(..., 6)`` MEE arrays by ``dt`` seconds of two-body motion."""
    x = np.asarray(x, dtype=float)
    dt = np.asarray(dt, dtype=float)
    lam0 = mean_longitude(x)
    lam = lam0 + mean_motion(x) * dt
    out = np.array(x, dtype=float, copy=True)
    # increment form keeps L exact at dt = 0 and monotone in dt despite round-off
    f, g = x[..., 1], x[..., 2]
    dL = true_longitude(lam, f, g) - true_longitude(lam0, f, g)
    out[..., 5] = x[..., 5] + np.where(dt == 0.0, 0.0, dL)
    return out


def time_between(x, L_from, L_to):
    """Two-body flight time from true longitude ``L_from`` to ``L_to`` (unwrapped)."""
    x = np.asarray(x, dtype=float)
    base = np.broadcast_to(x, np.broadcast_shapes(np.shape(L_from), np.shape(L_to)) + (6,)).copy()
    base[..., 5] = L_from
    lam0 = mean_longitude(base)
    base[..., 5] = L_to
    lam1 = mean_longitude(base)
    return (lam1 - lam0) / mean_motion(base)


def sensitivity_rows(x, mu: float = MU_EARTH):
    """Gauss variational matrix ``(..., 6, 3)`` mapping RTN acceleration to MEE rates."""
    x = np.asarray(x, dtype=float)
    p, f, g, h, k, L = (x[..., i] for i in range(6))
    cL, sL = np.cos(L), np.sin(L)
    w = 1.0 + f * cL + g * sL
    s2 = 1.0 + h * h + k * k
    q = np.sqrt(p / mu)
    hsk = h * sL - k * cL
    zero = np.zeros_like(p)
    A = np.stack(
        [
            np.stack([zero, 2.0 * p / w * q, zero], axis=-1),
            np.stack([q * sL, q * ((w + 1.0) * cL + f) / w, -q * g * hsk / w], axis=-1),
            np.stack([-q * cL, q * ((w + 1.0) * sL + g) / w, q * f * hsk / w], axis=-1),
            np.stack([zero, zero, q * s2 * cL / (2.0 * w)], axis=-1),
            np.stack([zero, zero, q * s2 * sL / (2.0 * w)], axis=-1),
            np.stack([zero, zero, q * hsk / w], axis=-1),
        ],
        axis=-2,
    )
    return A


def keplerian_rate(x, mu: float = MU_EARTH):
    """dL/dt of unperturbed motion."""
    x = np.asarray(x, dtype=float)
    p, f, g, L = x[..., 0], x[..., 1], x[..., 2], x[..., 5]
    w = 1.0 + f * np.cos(L) + g * np.sin(L)
    return np.sqrt(mu * p) * (w / p) ** 2


def rtn_basis(pos, vel):
    """Rows of the radial/transverse/normal frame, shape ``(..., 3, 3)``."""
    r_hat = pos / np.linalg.norm(pos, axis=-1, keepdims=True)
    hvec = np.cross(pos, vel)
    n_hat = hvec / np.linalg.norm(hvec, axis=-1, keepdims=True)
    t_hat = np.cross(n_hat, r_hat)
    return np.stack([r_hat, t_hat, n_hat], axis=-2)


def earth_rotation_angle(t):
    return np.mod(ERA_J2000 + OMEGA_EARTH * np.asarray(t, dtype=float), 2.0 * np.pi)


# ---------------------------------------------------------------------------
# dataclass-level API


def cart_to_mee(state: CartesianState) -> MeeState:
    if np.linalg.norm(state.position) <= 0.0:
        raise OrbitDomainError("zero position vector")
    x = rv_to_mee(state.position, state.velocity)
    return MeeState.from_array(x, srp_coeff=state.srp_coeff, epoch=state.epoch)


def mee_to_cart(state: MeeState) -> CartesianState:
    pos, vel = mee_to_rv(state.as_array())
    return CartesianState(pos, vel, srp_coeff=state.srp_coeff, epoch=state.epoch)


def kepler_propagate(state: MeeState, dt: float) -> MeeState:
    """Two-body propagation; only the true longitude changes."""
    if dt == 0.0:
        return state
    L = float(kepler_advance(state.as_array(), dt)[5])
    return replace(state, L=L, epoch=state.epoch + dt)


def sensitivity_matrix(state: MeeState) -> np.ndarray:
    """6x3 matrix mapping an RTN velocity impulse (km/s) to the MEE change."""
    return sensitivity_rows(state.as_array())


def apply_impulse(state: MeeState, dv_rtn) -> MeeState:
    """Exact (nonlinear) instantaneous RTN velocity change; L is kept on its branch."""
    pos, vel = mee_to_rv(state.as_array())
    basis = rtn_basis(pos, vel)
    vel = vel + np.asarray(dv_rtn, dtype=float) @ basis
    x = rv_to_mee(pos, vel)
    x[5] = unwrap_to(x[5], state.L)
    return MeeState.from_array(x, srp_coeff=state.srp_coeff, epoch=state.epoch)


def geo_mean_longitude(state: MeeState) -> float:
    """Earth-fixed longitude of the sub-satellite point at the state epoch."""
    pos, _ = mee_to_rv(state.as_array())
    return wrap_angle(math.atan2(pos[1], pos[0]) - float(earth_rotation_angle(state.epoch)))


def circular_state(radius: float, inclination: float = 0.0, raan: float = 0.0,
                   L: float = 0.0, srp_coeff: float = 0.0, epoch: float = 0.0) -> MeeState:
    t = math.tan(inclination / 2.0)
    return MeeState(radius, 0.0, 0.0, t * math.cos(raan), t * math.sin(raan), L,
                    srp_coeff=srp_coeff, epoch=epoch)


def check_altitude(pos) -> None:
    r = np.linalg.norm(np.asarray(pos), axis=-1)
    if np.any(r <= R_EARTH):
        raise OrbitError("state below the Earth's surface")
