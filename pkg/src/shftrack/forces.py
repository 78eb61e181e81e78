"""Force model: zonal gravity, luni-solar third bodies, cannonball SRP.

Sun and Moon positions come from low-precision analytic series (sub-degree
accuracy), which is plenty for perturbation magnitudes at GEO.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .constants import (
    AU, MU_EARTH, MU_MOON, MU_SUN, OBLIQUITY_J2000, P_SRP_1AU, R_EARTH, R_SUN, ZONALS,
)

_ASEC = math.pi / (180.0 * 3600.0)
_DEG = math.pi / 180.0
_CE, _SE = math.cos(OBLIQUITY_J2000), math.sin(OBLIQUITY_J2000)


@dataclass(frozen=True)
class ForceModelConfig:
    """Dynamics configuration.

    ``noise_sigma`` is the square root of the per-axis RTN acceleration power
    spectral density (km/s^1.5); it is realized as a piecewise-constant
    acceleration held over ``noise_step`` seconds.
    """
    zonal_degree: int = 0
    third_bodies: frozenset = field(default_factory=frozenset)
    srp_enabled: bool = False
    eclipse_model: str = "none"
    noise_sigma: float = 0.0
    noise_step: float = 3600.0
    # area-to-mass ratio (m^2/kg) scaled by the dimensionless SRP coefficient B
    area_to_mass: float = 0.02

    def __post_init__(self):
        if self.zonal_degree not in (0, 2, 3, 4, 5, 6):
            raise ValueError(f"zonal_degree must be 0 or 2..6, got {self.zonal_degree}")
        bodies = frozenset(b.lower() for b in self.third_bodies)
        if not bodies <= {"sun", "moon"}:
            raise ValueError(f"unknown third bodies {sorted(bodies)}")
        object.__setattr__(self, "third_bodies", bodies)
        if self.eclipse_model not in ("none", "conical"):
            raise ValueError(f"eclipse_model must be 'none' or 'conical', got {self.eclipse_model!r}")
        if self.noise_sigma < 0 or self.noise_step <= 0:
            raise ValueError("invalid process noise description")

    @property
    def two_body(self) -> bool:
        return self.zonal_degree == 0 and not self.third_bodies and not self.srp_enabled

    def without_noise(self) -> "ForceModelConfig":
        from dataclasses import replace
        return replace(self, noise_sigma=0.0)


TWO_BODY = ForceModelConfig()


def sun_position(t: float) -> np.ndarray:
    """Geocentric equatorial Sun position (km), t in seconds past J2000."""
    T = t / (36525.0 * 86400.0)
    M = (357.5256 + 35999.049 * T) * _DEG
    lam = (282.94 + 0.0) * _DEG + M + (6892.0 * math.sin(M) + 72.0 * math.sin(2 * M)) * _ASEC
    r = (149.619 - 2.499 * math.cos(M) - 0.021 * math.cos(2 * M)) * 1e6
    x, y = r * math.cos(lam), r * math.sin(lam)
    return np.array([x, y * _CE, y * _SE])


def moon_position(t: float) -> np.ndarray:
    """Geocentric equatorial Moon position (km), t in seconds past J2000."""
    T = t / (36525.0 * 86400.0)
    L0 = (218.31617 + 481267.88088 * T - 1.3972 * T) * _DEG
    l = (134.96292 + 477198.86753 * T) * _DEG
    lp = (357.52543 + 35999.04944 * T) * _DEG
    F = (93.27283 + 483202.01873 * T) * _DEG
    D = (297.85027 + 445267.11135 * T) * _DEG
    s = math.sin
    dlam = (22640 * s(l) + 769 * s(2 * l) - 4586 * s(l - 2 * D) + 2370 * s(2 * D)
            - 668 * s(lp) - 412 * s(2 * F) - 212 * s(2 * l - 2 * D) - 206 * s(l + lp - 2 * D)
            + 192 * s(l + 2 * D) - 165 * s(lp - 2 * D) + 148 * s(l - lp) - 125 * s(D)
            - 110 * s(l + lp) - 55 * s(2 * F - 2 * D))
    lam = L0 + dlam * _ASEC
    beta = (18520 * s(F + lam - L0 + (412 * s(2 * F) + 541 * s(lp)) * _ASEC)
            - 526 * s(F - 2 * D) + 44 * s(l + F - 2 * D) - 31 * s(-l + F - 2 * D)
            - 25 * s(-2 * l + F) - 23 * s(lp + F - 2 * D) + 21 * s(-l + F)
            + 11 * s(-lp + F - 2 * D)) * _ASEC
    c = math.cos
    r = (385000 - 20905 * c(l) - 3699 * c(2 * D - l) - 2956 * c(2 * D) - 570 * c(2 * l)
         + 246 * c(2 * l - 2 * D) - 205 * c(lp - 2 * D) - 171 * c(l + 2 * D)
         - 152 * c(l + lp - 2 * D))
    x = r * math.cos(lam) * math.cos(beta)
    y = r * math.sin(lam) * math.cos(beta)
    z = r * math.sin(beta)
    return np.array([x, y * _CE - z * _SE, y * _SE + z * _CE])


def zonal_acceleration(pos, degree: int):
    """Acceleration from zonal harmonics J2..J<degree>, shape like ``pos``."""
    r = np.linalg.norm(pos, axis=-1, keepdims=True)
    rhat = pos / r
    s = rhat[..., 2:3]
    acc = np.zeros_like(pos)
    # Legendre recursion for P_n(s) and its derivative
    P_prev, P = np.ones_like(s), s
    dP_prev, dP = np.zeros_like(s), np.ones_like(s)
    zhat = np.zeros_like(pos)
    zhat[..., 2] = 1.0
    for n in range(2, degree + 1):
        P_next = ((2 * n - 1) * s * P - (n - 1) * P_prev) / n
        dP_next = dP_prev + (2 * n - 1) * P
        P_prev, P = P, P_next
        dP_prev, dP = dP, dP_next
        c = MU_EARTH * ZONALS[n] * R_EARTH**n / r ** (n + 2)
        acc = acc + c * (((n + 1) * P + s * dP) * rhat - dP * zhat)
    return acc


def third_body_acceleration(pos, body_pos, mu_body: float):
    d = body_pos - pos
    dn = np.linalg.norm(d, axis=-1, keepdims=True)
    bn = np.linalg.norm(body_pos)
    return mu_body * (d / dn**3 - body_pos / bn**3)


def shadow_fraction(pos, sun_pos):
    """Illuminated fraction of the solar disc (conical Earth shadow)."""
    d = sun_pos - pos
    dn = np.linalg.norm(d, axis=-1)
    rn = np.linalg.norm(pos, axis=-1)
    a = np.arcsin(np.clip(R_SUN / dn, -1.0, 1.0))
    b = np.arcsin(np.clip(R_EARTH / rn, -1.0, 1.0))
    c = np.arccos(np.clip(np.sum(-pos * d, axis=-1) / (rn * dn), -1.0, 1.0))
    nu = np.ones_like(rn)
    full = c <= b - a
    nu = np.where(full, 0.0, nu)
    partial = (np.abs(a - b) < c) & (c < a + b)
    if np.any(partial):
        x = (c * c + a * a - b * b) / (2.0 * c)
        y = np.sqrt(np.clip(a * a - x * x, 0.0, None))
        area = (a * a * np.arccos(np.clip(x / a, -1, 1))
                + b * b * np.arccos(np.clip((c - x) / b, -1, 1)) - c * y)
        nu = np.where(partial, 1.0 - area / (np.pi * a * a), nu)
    return nu


def srp_acceleration(pos, B, sun_pos, cfg: ForceModelConfig):
    d = pos - sun_pos
    dn = np.linalg.norm(d, axis=-1, keepdims=True)
    # m/s^2 -> km/s^2
    mag = np.asarray(B)[..., None] * cfg.area_to_mass * P_SRP_1AU * (AU / dn) ** 2 * 1e-3
    acc = mag * d / dn
    if cfg.eclipse_model == "conical":
        acc = acc * shadow_fraction(pos, sun_pos)[..., None]
    return acc


def perturbing_acceleration(t: float, pos, B, cfg: ForceModelConfig):
    """Total non-central acceleration (km/s^2) in the inertial frame."""
    acc = np.zeros_like(pos)
    if cfg.zonal_degree >= 2:
        acc = acc + zonal_acceleration(pos, cfg.zonal_degree)
    sun = None
    if "sun" in cfg.third_bodies or cfg.srp_enabled:
        sun = sun_position(t)
    if "sun" in cfg.third_bodies:
        acc = acc + third_body_acceleration(pos, sun, MU_SUN)
    if "moon" in cfg.third_bodies:
        acc = acc + third_body_acceleration(pos, moon_position(t), MU_MOON)
    if cfg.srp_enabled:
        acc = acc + srp_acceleration(pos, B, sun, cfg)
    return acc
