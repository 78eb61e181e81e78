"""Admissible control region around a post-maneuver attributable.

Every candidate state is built from the attributable plus a (range,
range-rate) pair; its cost is the control distance from the pre-maneuver
orbit. The pre-maneuver orbit used for the metric is the *effective*
Keplerian orbit: the perturbed prediction to the attributable epoch
propagated back by the same time of flight with two-body motion, so that the
two-body transfer model inside the metric does not charge for the
perturbation drift accumulated over the coast.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .control_metric import DEFAULT_C1, control_distance_batch
from .forces import TWO_BODY, ForceModelConfig
from .observation import Attributable, observe, observe_with_range, residual, states_from_range
from .orbits import MeeState, kepler_propagate, mee_to_rv, rv_to_mee, unwrap_to
from .propagation import perturbed_propagate

RHO_CAP = 5000.0
# Lighter longitude search for the many control-distance evaluations made
# while building regions and sampling; P agrees with the fully converged
# optimizer to about 0.1 %.
SAMPLING_SEARCH = {"n_starts": 2, "maxiter": 4}
RHO_RATE_CAP = 1.0
OBS_SIGMAS = 3.0
DIMENSIONS = ("alpha", "delta", "alpha_rate", "delta_rate", "rho", "rho_rate")


class CentroidError(RuntimeError):
    """No interior residual minimum over the (inclination, true anomaly) search box."""


@dataclass(frozen=True)
class RegionThresholds:
    p_max: float = 10e-3
    p_min: float = 1e-3
    k_p: float = 3.0

    def __post_init__(self):
        if not 0 < self.p_min <= self.p_max:
            raise ValueError("thresholds need 0 < p_min <= p_max")
        if self.k_p < 1:
            raise ValueError("k_p must be >= 1")


def admissible_threshold(p_centroid: float, th: RegionThresholds) -> float:
    if p_centroid < 0:
        raise ValueError("negative control distance")
    return min(th.p_max, max(th.p_min, th.k_p * p_centroid))


@dataclass(frozen=True)
class Centroid:
    state: MeeState
    rho: float
    rho_rate: float
    d_inclination: float
    d_anomaly: float
    residual_norm: float


@dataclass(frozen=True)
class AdmissibleRegion:
    attr: Attributable
    pre_orbit: MeeState  # effective Keplerian pre-maneuver orbit
    tof: float
    centroid: Centroid
    p_centroid: float
    p_adm: float
    bounds: np.ndarray  # (6, 2) over (alpha, delta, alpha_rate, delta_rate, rho, rho_rate)
    unbounded: tuple = field(default=(False, False, False, False))

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (6, 2) or np.any(b[:, 0] > b[:, 1]):
            raise ValueError("bounds must be (6, 2) with lo <= hi")
        object.__setattr__(self, "bounds", b)

    @property
    def center(self) -> np.ndarray:
        z = self.attr.z
        return np.array([z[0], z[1], z[2], z[3], self.centroid.rho, self.centroid.rho_rate])

    @property
    def widths(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]


def contains(region: AdmissibleRegion, attr_point, rho: float, rho_rate: float) -> bool:
    pt = np.concatenate([np.asarray(attr_point, dtype=float), [rho, rho_rate]])
    pt[0] = unwrap_to(pt[0], region.center[0])
    return bool(np.all((pt >= region.bounds[:, 0]) & (pt <= region.bounds[:, 1])))


def in_box(bounds, points) -> np.ndarray:
    """Vectorized box membership for ``(..., 6)`` points (alpha unwrapped by the caller)."""
    points = np.asarray(points, dtype=float)
    return np.all((points >= bounds[:, 0]) & (points <= bounds[:, 1]), axis=-1)


def effective_pre_orbit(pre_orbit: MeeState, tof: float,
                        cfg: ForceModelConfig = TWO_BODY) -> MeeState:
    """Two-body orbit that lands on the perturbed prediction after ``tof``."""
    if cfg.two_body:
        return pre_orbit
    pred = perturbed_propagate(pre_orbit, tof, cfg.without_noise())
    return kepler_propagate(pred, -tof)


def points_to_mee(points, attr: Attributable) -> np.ndarray:
    """MEE arrays ``(K, 6)`` for sample points ``(K, 6)`` in (observables, rho, rho_rate)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rs, vs = attr.site.inertial(attr.epoch)
    pos, vel = states_from_range(points[:, :4], points[:, 4], points[:, 5], rs, vs)
    return rv_to_mee(pos, vel, check=False)


def control_cost(pre_eff: MeeState, attr: Attributable, tof: float, points,
                 c1: float = DEFAULT_C1, chunk: int = 64, **kw) -> np.ndarray:
    """Control distance (km/s) of each sample point from the effective pre-maneuver orbit."""
    kw = {**SAMPLING_SEARCH, **kw}
    x = points_to_mee(points, attr)
    Lf = float(kepler_propagate(pre_eff, tof).L)
    x[:, 5] = unwrap_to(x[:, 5], Lf)
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = control_distance_batch(pre_eff, x[s:s + chunk], tof, c1=c1, **kw)
    return np.where(np.isfinite(out), out, np.inf)


def range_cost(pre_eff, attr, tof, rho, rho_rate, **kw) -> np.ndarray:
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    rho_rate = np.broadcast_to(np.asarray(rho_rate, dtype=float), rho.shape)
    pts = np.empty((rho.size, 6))
    pts[:, :4] = attr.z
    pts[:, 4] = rho.ravel()
    pts[:, 5] = rho_rate.ravel()
    return control_cost(pre_eff, attr, tof, pts, **kw).reshape(rho.shape)


# ---------------------------------------------------------------------------
# centroid


def _adjusted(x, di, dth):
    """MEE with inclination shifted by ``di`` and true longitude by ``dth`` (node fixed)."""
    x = np.array(x, dtype=float, copy=True)
    di = np.asarray(di, dtype=float)
    dth = np.asarray(dth, dtype=float)
    x = np.broadcast_to(x, np.broadcast_shapes(di.shape, dth.shape) + (6,)).copy()
    inc = 2.0 * np.arctan(np.hypot(x[..., 3], x[..., 4]))
    raan = np.arctan2(x[..., 4], x[..., 3])
    t = np.tan((inc + di) / 2.0)
    x[..., 3] = t * np.cos(raan)
    x[..., 4] = t * np.sin(raan)
    x[..., 5] = x[..., 5] + dth
    return x


def centroid(pre_orbit: MeeState, attr: Attributable, tof: float | None = None,
             cfg: ForceModelConfig = TWO_BODY, box=(math.radians(2.0), math.radians(5.0)),
             grid: int = 36) -> Centroid:
    """Pre-maneuver orbit bent in inclination and true anomaly to meet the attributable."""
    tof = attr.epoch - pre_orbit.epoch if tof is None else tof
    if not tof > 0:
        raise ValueError(f"time of flight must be positive, got {tof}")
    pred = perturbed_propagate(pre_orbit, tof, cfg.without_noise())
    x = pred.as_array()
    rs, vs = attr.site.inertial(attr.epoch)
    z = attr.z

    def cost(di, dth):
        pos, vel = mee_to_rv(_adjusted(x, di, dth))
        r = residual(z, observe(pos, vel, rs, vs))
        return np.sum(r * r, axis=-1)

    di_box, dth_box = box
    gi = np.linspace(-di_box, di_box, grid)
    gt = np.linspace(-dth_box, dth_box, grid)
    C = cost(gi[:, None], gt[None, :])
    a, b = np.unravel_index(np.argmin(C), C.shape)
    res = minimize(lambda v: float(cost(v[0], v[1])), [gi[a], gt[b]], method="Nelder-Mead",
                   options={"xatol": 1e-14, "fatol": 1e-30, "maxiter": 4000,
                            "initial_simplex": [[gi[a], gt[b]],
                                                [gi[a] + di_box / grid, gt[b]],
                                                [gi[a], gt[b] + dth_box / grid]]})
    di, dth = res.x
    if abs(di) >= di_box or abs(dth) >= dth_box:
        raise CentroidError("residual minimum not inside the inclination/anomaly box")
    xs = _adjusted(x, di, dth)
    pos, vel = mee_to_rv(xs)
    _, rho, rhod = observe_with_range(pos, vel, rs, vs)
    p2, v2 = states_from_range(z, rho, rhod, rs, vs)
    xm = rv_to_mee(p2, v2)
    xm[5] = unwrap_to(xm[5], xs[5])
    state = MeeState.from_array(xm, srp_coeff=pre_orbit.srp_coeff, epoch=attr.epoch)
    return Centroid(state, float(rho), float(rhod), float(di), float(dth), float(math.sqrt(res.fun)))


def robust_centroid(pre_orbit, attr, tof=None, cfg=TWO_BODY) -> Centroid:
    """Centroid with one retry on a doubled search box."""
    try:
        return centroid(pre_orbit, attr, tof, cfg)
    except CentroidError:
        return centroid(pre_orbit, attr, tof, cfg, box=(math.radians(4.0), math.radians(10.0)))


# ---------------------------------------------------------------------------
# fuel-optimal point and the orthotope


def x_opt(pre_eff: MeeState, attr: Attributable, tof: float, center=None, region=None,
          grid: int = 41, half_width=(500.0, 0.5), zoom_rounds: int = 6):
    """(rho, rho_rate, P) minimizing the control distance along the attributable."""
    if region is not None:
        (r0, r1), (v0, v1) = region.bounds[4], region.bounds[5]
    else:
        if center is None:
            raise ValueError("x_opt needs a centroid or a region to define its search grid")
        r0, r1 = center[0] - half_width[0], center[0] + half_width[0]
        v0, v1 = center[1] - half_width[1], center[1] + half_width[1]
        r0 = max(r0, 1.0)
    R, V = np.meshgrid(np.linspace(r0, r1, grid), np.linspace(v0, v1, grid), indexing="ij")
    P = range_cost(pre_eff, attr, tof, R, V)
    k = np.unravel_index(np.argmin(P), P.shape)
    best = np.array([R[k], V[k]])
    cell = np.array([(r1 - r0) / (grid - 1), (v1 - v0) / (grid - 1)])
    p_best = float(P[k])
    # batched zoom: a 9x9 stencil spanning one cell either side, shrinking 4x per round
    u = np.linspace(-1.0, 1.0, 9)
    for _ in range(zoom_rounds):
        dR, dV = np.meshgrid(u * cell[0], u * cell[1], indexing="ij")
        Rz, Vz = best[0] + dR, best[1] + dV
        Pz = np.where(Rz > 1.0, range_cost(pre_eff, attr, tof, np.maximum(Rz, 1.0), Vz), np.inf)
        j = np.unravel_index(np.argmin(Pz), Pz.shape)
        if Pz[j] < p_best:
            best, p_best = np.array([Rz[j], Vz[j]]), float(Pz[j])
        cell = cell / 4.0
    return float(best[0]), float(best[1]), p_best


def _boundary(f, start: float, p_start: float, p_adm: float, direction: int, step: float,
              cap: float, tol: float):
    """First crossing of f = p_adm moving from ``start`` in ``direction``."""
    lo, plo = start, p_start
    width = step
    while True:
        hi = start + direction * width
        if direction * (hi - start) >= cap:
            hi = start + direction * cap
            phi = f(hi)
            if phi <= p_adm:
                return hi, True
            break
        phi = f(hi)
        if phi > p_adm:
            break
        lo, plo = hi, phi
        width *= 2.0
    # bisection between admissible lo and inadmissible hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        pm = f(mid)
        if pm > p_adm:
            hi, phi = mid, pm
        else:
            lo, plo = mid, pm
        if abs(plo - p_adm) <= tol or abs(phi - p_adm) <= tol or abs(hi - lo) < 1e-12 * max(1.0, abs(lo)):
            break
    return (lo if abs(plo - p_adm) <= abs(phi - p_adm) else hi), False


def orthotope_bounds(cen: Centroid, attr: Attributable, pre_eff: MeeState, tof: float,
                     th: RegionThresholds, rho_step: float = 20.0,
                     rho_rate_step: float = 0.002) -> AdmissibleRegion:
    if attr.covariance is None:
        raise ValueError("attributable covariance required for the observable bounds")
    pc = float(range_cost(pre_eff, attr, tof, cen.rho, cen.rho_rate)[0])
    p_adm = admissible_threshold(pc, th)
    tol = 1e-3 * p_adm
    f_rho = lambda r: float(range_cost(pre_eff, attr, tof, r, cen.rho_rate)[0]) if r > 1.0 else np.inf
    f_rr = lambda v: float(range_cost(pre_eff, attr, tof, cen.rho, v)[0])
    flags = []
    lims = []
    for f, x0, step, cap in ((f_rho, cen.rho, rho_step, RHO_CAP),
                             (f_rr, cen.rho_rate, rho_rate_step, RHO_RATE_CAP)):
        pair = []
        for d in (-1, 1):
            if pc > p_adm:
                # centroid itself above threshold (cannot happen unless p_max binds)
                pair.append(x0)
                flags.append(False)
                continue
            b, capped = _boundary(f, x0, pc, p_adm, d, step, cap, tol)
            pair.append(b)
            flags.append(capped)
        lims.append(pair)
    sig = np.sqrt(np.diag(attr.covariance))
    z = attr.z
    bounds = np.empty((6, 2))
    bounds[:4, 0] = z - OBS_SIGMAS * sig
    bounds[:4, 1] = z + OBS_SIGMAS * sig
    bounds[4] = lims[0]
    bounds[5] = lims[1]
    return AdmissibleRegion(attr, pre_eff, tof, cen, pc, p_adm, bounds, tuple(flags))


def build_region(pre_orbit: MeeState, attr: Attributable, th: RegionThresholds,
                 cfg: ForceModelConfig = TWO_BODY) -> AdmissibleRegion:
    """Centroid, threshold and orthotope for a post-maneuver attributable."""
    tof = attr.epoch - pre_orbit.epoch
    cen = robust_centroid(pre_orbit, attr, tof, cfg)
    pre_eff = effective_pre_orbit(pre_orbit, tof, cfg)
    return orthotope_bounds(cen, attr, pre_eff, tof, th)


def region_grid(region: AdmissibleRegion, n: int = 101):
    """(rho, rho_rate, P) over the range/range-rate face of the box."""
    R, V = np.meshgrid(np.linspace(*region.bounds[4], n), np.linspace(*region.bounds[5], n),
                       indexing="ij")
    P = range_cost(region.pre_orbit, region.attr, region.tof, R, V)
    return R, V, P
