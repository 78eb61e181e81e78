"""Truth simulation with station keeping, track generation and end-to-end runs."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .admissible_region import RegionThresholds
from .baseline_mhe import MovingHorizonEstimator
from .constants import DAY, MU_EARTH, OMEGA_EARTH
from .filters import derive_seed
from .forces import ForceModelConfig, sun_position
from .metrics import (d2 as d2_metric, elapsed_tracks, pcrb_recursion, PcrbStep,
                      position_velocity_sigma, rmse_by_elapsed_tracks, write_d2, write_pcrb,
                      write_rmse)
from .observation import (Attributable, SensorSite, Track, attributable_from_track, observe,
                          visibility)
from .orbits import (CartesianState, MeeState, apply_impulse, earth_rotation_angle,
                     geo_mean_longitude, mee_to_rv, rv_to_mee, sensitivity_matrix, time_between,
                     unwrap_to, wrap_angle)
from .propagation import propagate_array, trajectory
from .shf import FilterConfig, ShfSession, write_events, write_records

DV_LIMIT = 0.05  # km/s
SAMPLE_STEP = 300.0
PLAN_STEP = 6 * 3600.0
EDGE_FRACTION = 0.9
LOOKAHEAD = 1.5 * DAY  # burns are scheduled up to a day ahead, so trigger on the projection
PLAN_GAP = 2.2 * DAY  # drift estimation needs two clean sidereal days after a burn
BURN1_HOUR = 6.5  # local solar time of the first EWSK burn; the second falls at 18:30


class PlanningError(RuntimeError):
    pass


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManeuverEvent:
    epoch: float
    kind: str  # NSSK | EWSK_burn1 | EWSK_burn2
    dv: tuple  # RTN, km/s

    def __post_init__(self):
        if np.linalg.norm(self.dv) > DV_LIMIT:
            raise PlanningError(f"{self.kind} burn of {np.linalg.norm(self.dv) * 1e3:.1f} m/s "
                                "exceeds the 50 m/s limit")


@dataclass
class TrackSettings:
    obs_probability: float = 0.5
    length_min: tuple = (2.0, 10.0)
    n_points: int = 10
    scan_step: float = 600.0


@dataclass
class ScenarioConfig:
    epoch0: float = 800 * DAY
    duration_days: float = 60.0
    lon0_deg: float = -4.8
    inc0_deg: float = 2.0
    raan0_deg: float = 80.0
    drift0_deg_day: float = 0.03
    ewsk_drift_deg_day: float = 0.035
    B0: float = 1.0
    lon_center_deg: float = -4.8
    lon_halfwidth_deg: float = 0.2
    inc_center_deg: float = 2.0
    inc_halfwidth_deg: float = 0.05
    truth_force: ForceModelConfig = field(default_factory=lambda: ForceModelConfig(
        zonal_degree=2, third_bodies=frozenset({"sun", "moon"}), srp_enabled=True))
    filter_force: ForceModelConfig = field(default_factory=lambda: ForceModelConfig(
        zonal_degree=2, third_bodies=frozenset({"sun", "moon"}), srp_enabled=True,
        noise_sigma=1e-10, noise_step=PLAN_STEP))
    sensors: list = field(default_factory=lambda: [
        SensorSite("zimmerwald", math.radians(46.877), math.radians(7.465), 0.951),
        SensorSite("tenerife", math.radians(28.300), math.radians(-16.512), 2.39)])
    b_jump_rate_days: float = 7.0
    b_jump_sigma: float = 0.1
    tracks: TrackSettings = field(default_factory=TrackSettings)
    filter: FilterConfig = field(default_factory=FilterConfig)
    initial_sigma: tuple = (0.5, 1e-6, 1e-6, 1e-6, 1e-6, 1e-5)  # p km, f, g, h, k, L rad
    pcrb_mc: int = 100
    seed: int = 1

    def __post_init__(self):
        if not (self.lon_halfwidth_deg > 0 and self.inc_halfwidth_deg > 0):
            raise ValueError("slot half-widths must be positive")
        if not self.duration_days > 0:
            raise ValueError("duration must be positive")

    @property
    def t_end(self) -> float:
        return self.epoch0 + self.duration_days * DAY


# ---------------------------------------------------------------------------
# truth


def initial_state(cfg: ScenarioConfig) -> MeeState:
    n = OMEGA_EARTH + math.radians(cfg.drift0_deg_day) / DAY
    a = (MU_EARTH / n**2) ** (1.0 / 3.0)
    i, om = math.radians(cfg.inc0_deg), math.radians(cfg.raan0_deg)
    L = math.radians(cfg.lon0_deg) + float(earth_rotation_angle(cfg.epoch0))
    t = math.tan(i / 2)
    return MeeState(a, 0.0, 0.0, t * math.cos(om), t * math.sin(om), L, srp_coeff=cfg.B0,
                    epoch=cfg.epoch0)


@dataclass
class Truth:
    times: np.ndarray
    states: np.ndarray  # (T, 6) MEE, L unwrapped
    B: np.ndarray
    events: list
    b_jumps: list
    cfg: ScenarioConfig

    def state_at(self, t: float) -> MeeState:
        """Truth state at ``t`` (after any impulse applied exactly at ``t``)."""
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        if j < 0:
            raise ValueError("epoch before the start of the truth run")
        s = MeeState.from_array(self.states[j], srp_coeff=float(self.B[j]), epoch=self.times[j])
        if t == self.times[j]:
            return s
        x = propagate_array(s.as_array()[None], s.srp_coeff, s.epoch, t - s.epoch,
                            self.cfg.truth_force.without_noise())[0]
        return MeeState.from_array(x, srp_coeff=s.srp_coeff, epoch=t)

    def cartesian_at(self, t: float) -> np.ndarray:
        pos, vel = mee_to_rv(self.state_at(t).as_array())
        return np.concatenate([pos, vel])

    def maneuvers(self) -> list:
        """Truth maneuvers as (first burn epoch, last burn epoch, kind)."""
        out = []
        for e in self.events:
            if e.kind == "EWSK_burn2" and out and out[-1][2] == "EWSK":
                out[-1] = (out[-1][0], e.epoch, "EWSK")
            else:
                out.append((e.epoch, e.epoch, "EWSK" if e.kind == "EWSK_burn1" else e.kind))
        return out


def _local_hour(state: MeeState) -> float:
    pos, _ = mee_to_rv(state.as_array())
    sun = sun_position(state.epoch)
    H = wrap_angle(math.atan2(pos[1], pos[0]) - math.atan2(sun[1], sun[0]))
    return (12.0 + math.degrees(H) / 15.0) % 24.0


def _time_to_local_hour(state: MeeState, hour: float, min_wait: float = 600.0) -> float:
    dh = (hour - _local_hour(state)) % 24.0
    dt = dh * 3600.0 * (2 * math.pi / OMEGA_EARTH) / DAY
    return dt if dt >= min_wait else dt + 2 * math.pi / OMEGA_EARTH


def drift_rate(truth_times, lon_hist) -> float:
    """Mean-longitude drift (rad/s): difference of the last two sidereal-day longitude means.

    Averaging over whole sidereal days cancels the daily longitude libration
    that biases a straight-line fit.
    """
    t = np.asarray(truth_times, dtype=float)
    lon = np.unwrap(np.asarray(lon_hist, dtype=float))
    sd = 2 * math.pi / OMEGA_EARTH
    a = (t > t[-1] - sd)
    b = (t > t[-1] - 2 * sd) & ~a
    if a.sum() < 3 or b.sum() < 3:
        return 0.0
    return float((lon[a].mean() - lon[b].mean()) / (t[a].mean() - t[b].mean()))


def plan_station_keeping(cfg: ScenarioConfig, state: MeeState, drift: float) -> list:
    """Next burns (possibly none) for the current truth state and longitude drift (rad/s).

    NSSK: one normal burn at the next node when the inclination leaves its
    band, resetting it to the band centre. EWSK: when the longitude is
    projected to reach the band edge, two equal tangential burns half an orbit
    apart set the drift to the configured magnitude in the opposite sense.
    """
    out = []
    inc = state.inclination
    ic, ih = math.radians(cfg.inc_center_deg), math.radians(cfg.inc_halfwidth_deg)
    if abs(inc - ic) > ih:
        u = wrap_angle(state.L - state.raan)  # argument of latitude
        to_node = (-u) % math.pi
        x = state.as_array()
        dt = float(time_between(x, x[5], x[5] + max(to_node, 1e-3)))
        ascending = math.cos(u + to_node) > 0
        v = math.sqrt(MU_EARTH / state.sma)
        di = ic - inc
        dvn = 2.0 * v * math.sin(abs(di) / 2.0) * np.sign(di) * (1.0 if ascending else -1.0)
        out.append(ManeuverEvent(state.epoch + dt, "NSSK", (0.0, 0.0, float(dvn))))
    lc, lh = math.radians(cfg.lon_center_deg), math.radians(cfg.lon_halfwidth_deg)
    off = wrap_angle(geo_mean_longitude(state) - lc)
    ahead = off + drift * LOOKAHEAD
    if abs(ahead) >= EDGE_FRACTION * lh and off * drift > 0:
        n = state.mean_motion
        target = -math.copysign(math.radians(cfg.ewsk_drift_deg_day) / DAY, drift)
        da = -(2.0 / 3.0) * state.sma * (target - drift) / n
        A = sensitivity_matrix(state)
        dp = da * (1.0 - state.f**2 - state.g**2)
        dvt = dp / A[0, 1] / 2.0
        t1 = state.epoch + _time_to_local_hour(state, BURN1_HOUR)
        if out and abs(out[0].epoch - t1) < 3600.0:
            t1 += 2 * math.pi / OMEGA_EARTH
        t2 = t1 + math.pi / n
        out += [ManeuverEvent(t1, "EWSK_burn1", (0.0, float(dvt), 0.0)),
                ManeuverEvent(t2, "EWSK_burn2", (0.0, float(dvt), 0.0))]
    return sorted(out, key=lambda e: e.epoch)


def _b_jumps(cfg: ScenarioConfig, rng) -> list:
    out = []
    if not math.isfinite(cfg.b_jump_rate_days) or cfg.b_jump_sigma == 0:
        return out
    t = cfg.epoch0
    while True:
        t += rng.exponential(cfg.b_jump_rate_days * DAY)
        if t >= cfg.t_end:
            return out
        out.append((float(t), float(rng.normal(0.0, cfg.b_jump_sigma))))


def simulate_truth(cfg: ScenarioConfig, plan: bool = True) -> Truth:
    rng = np.random.default_rng(derive_seed(cfg.seed, 101))
    jumps = _b_jumps(cfg, rng)
    force = cfg.truth_force.without_noise()
    s = initial_state(cfg)
    times, states, Bs = [s.epoch], [s.as_array()], [s.srp_coeff]
    events, pending = [], []
    jq = list(jumps)
    last_burn = -math.inf
    while s.epoch < cfg.t_end - 1e-6:
        stops = [cfg.t_end, s.epoch + PLAN_STEP]
        if pending:
            stops.append(pending[0].epoch)
        if jq:
            stops.append(jq[0][0])
        t_next = min(stops)
        grid = np.arange(s.epoch + SAMPLE_STEP, t_next, SAMPLE_STEP)
        grid = np.append(grid[grid < t_next - 1e-6], t_next)
        xs = trajectory(s, grid, force)
        x = xs[-1]
        times.extend(grid.tolist())
        states.extend(xs)
        Bs.extend([s.srp_coeff] * len(grid))
        s = MeeState.from_array(x, srp_coeff=s.srp_coeff, epoch=t_next)
        changed = False
        while pending and abs(pending[0].epoch - t_next) < 1e-6:
            ev = pending.pop(0)
            s = apply_impulse(s, ev.dv)
            events.append(ev)
            last_burn = t_next
            changed = True
        while jq and abs(jq[0][0] - t_next) < 1e-6:
            _, dB = jq.pop(0)
            s = replace(s, srp_coeff=max(0.0, s.srp_coeff + dB))
            changed = True
        if changed:
            times.append(t_next)
            states.append(s.as_array())
            Bs.append(s.srp_coeff)
        if plan and not pending and t_next - last_burn > PLAN_GAP:
            t_arr = np.asarray(times)
            m = t_arr >= t_next - 2.1 * DAY
            lon = [geo_mean_longitude(MeeState.from_array(v, epoch=t))
                   for v, t in zip(np.asarray(states)[m], t_arr[m])]
            drift = drift_rate(t_arr[m], lon)
            for ev in plan_station_keeping(cfg, s, drift):
                if ev.epoch < cfg.t_end:
                    pending.append(ev)
            pending.sort(key=lambda e: e.epoch)
    states = np.array(states)
    states[:, 5] = np.unwrap(states[:, 5])
    return Truth(np.array(times), states, np.array(Bs), events, jumps, cfg)


# ---------------------------------------------------------------------------
# tracks


def visibility_windows(truth: Truth, site: SensorSite, step: float):
    """(start, end) epochs of contiguous visibility, scanned on the stored truth samples."""
    t_all = truth.times
    keep = np.concatenate([[True], np.diff(np.floor((t_all - t_all[0]) / step)) > 0])
    t, xs = t_all[keep], truth.states[keep]
    pos, vel = mee_to_rv(xs)
    vis = np.array([visibility(CartesianState(p, v), site, sun_position(ti), ti)
                    for p, v, ti in zip(pos, vel, t)])
    windows, start = [], None
    for i, v in enumerate(vis):
        if v and start is None:
            start = t[i]
        if (not v or i == len(t) - 1) and start is not None:
            end = t[i] if v else t[i - 1]
            if end > start:
                windows.append((float(start), float(end)))
            start = None
    return windows


def generate_tracks(truth: Truth, sensors=None, settings: TrackSettings | None = None,
                    seed: int | None = None, noiseless: bool = False) -> list:
    """Attributables from randomly scheduled tracks, at most one per visibility window."""
    cfg = truth.cfg
    sensors = cfg.sensors if sensors is None else sensors
    st = cfg.tracks if settings is None else settings
    seed = cfg.seed if seed is None else seed
    burns = [e.epoch for e in truth.events]
    out = []
    for si, site in enumerate(sensors):
        rng = np.random.default_rng(derive_seed(seed, 202, si))
        for w0, w1 in visibility_windows(truth, site, st.scan_step):
            u_take = rng.random()
            T = rng.uniform(*st.length_min) * 60.0
            u_pos = rng.random()
            noise = rng.standard_normal((2, st.n_points))
            if u_take >= st.obs_probability or w1 - w0 < T:
                continue
            ts = w0 + u_pos * (w1 - w0 - T) + np.linspace(0.0, T, st.n_points)
            if any(ts[0] <= b <= ts[-1] for b in burns):
                continue
            rs = [site.inertial(t) for t in ts]
            z = np.array([observe(*np.split(truth.cartesian_at(t), 2), r, v)
                          for t, (r, v) in zip(ts, rs)])
            sig = 0.0 if noiseless else site.noise_sigma
            alpha = z[:, 0] + sig * noise[0]
            delta = z[:, 1] + sig * noise[1]
            attr = attributable_from_track(Track(ts, alpha, delta, site), sigma=site.noise_sigma)
            out.append(attr)
    out.sort(key=lambda a: (a.epoch, a.site.name))
    kept = []
    for a in out:
        if kept and a.epoch - kept[-1].epoch < 1800.0:
            continue
        kept.append(a)
    return kept


def mean_reobservation_days(attrs) -> float:
    if len(attrs) < 2:
        return float("nan")
    return float(np.mean(np.diff([a.epoch for a in attrs])) / DAY)


# ---------------------------------------------------------------------------
# end-to-end runs


@dataclass
class TruthManeuver:
    first_epoch: float
    last_epoch: float
    kind: str
    first_track: int | None
    detectable: bool


def truth_maneuver_table(truth: Truth, attrs) -> list:
    epochs = np.array([a.epoch for a in attrs])
    mans = truth.maneuvers()
    out = []
    for j, (t0, t1, kind) in enumerate(mans):
        nxt = mans[j + 1][0] if j + 1 < len(mans) else math.inf
        idx = np.nonzero(epochs > t0)[0]
        first = int(idx[0]) if len(idx) else None
        detectable = first is not None and epochs[first] < nxt
        out.append(TruthManeuver(t0, t1, kind, first, bool(detectable)))
    return out


def score_detections(detections, truth_table) -> dict:
    """Classify detections (first post-maneuver track indices) as correct, delayed or false."""
    det = sorted(detections)
    used = set()
    result = {"correct": 0, "delayed": 0, "missed": 0, "false": 0}
    rows = []
    for m in truth_table:
        if not m.detectable:
            continue
        hit = None
        for d in det:
            if d in used:
                continue
            if m.first_track <= d <= m.first_track + 2:
                hit = d
                break
        if hit is None:
            result["missed"] += 1
            rows.append((m.first_epoch, m.kind, m.first_track, None, "missed"))
            continue
        used.add(hit)
        status = "correct" if hit == m.first_track else "delayed"
        result[status] += 1
        rows.append((m.first_epoch, m.kind, m.first_track, hit, status))
    result["false"] = len([d for d in det if d not in used])
    return result, rows


@dataclass
class RunReport:
    method: str
    seed: int
    n_tracks: int
    truth_table: list
    track_rows: list  # per-track dicts
    detections: dict
    detection_rows: list
    rmse: list
    events: list
    records: list
    d2_rows: list
    pcrb_rows: list
    runtime_s: float
    reobservation_days: float = float("nan")
    spawn_log: list = field(default_factory=list)

    @property
    def n_maneuvers(self) -> int:
        return len(self.truth_table)


def _initial_population_cov(cfg: ScenarioConfig) -> np.ndarray:
    return np.diag(np.square(cfg.initial_sigma))


def _initial_estimate(cfg: ScenarioConfig, truth: Truth) -> MeeState:
    rng = np.random.default_rng(derive_seed(cfg.seed, 303))
    x0 = truth.state_at(cfg.epoch0)
    x = rng.multivariate_normal(x0.as_array(), _initial_population_cov(cfg))
    return MeeState.from_array(x, srp_coeff=x0.srp_coeff, epoch=cfg.epoch0)


def _run_shf(cfg, truth, attrs, heuristics):
    fcfg = replace(cfg.filter, heuristics=heuristics, force=cfg.filter_force,
                   seed=derive_seed(cfg.seed, 404))
    sess = ShfSession.from_gaussian(_initial_estimate(cfg, truth), _initial_population_cov(cfg),
                                    fcfg)
    rows, detections = [], []
    for a in attrs:
        rep = sess.process_track(a)
        rows.append((rep.estimate, rep.covariance))
        for e in rep.events:
            if e["type"] == "promote":
                detections.append(e["first_track_index"])
    final = sess.finalize()
    if final is not None:
        detections.extend(e["first_track_index"] for e in final.events if e["type"] == "promote")
    return rows, detections, sess.events, sess.records, sess.spawn_log


def _run_mhe(cfg, truth, attrs, truth_epochs=None):
    est = MovingHorizonEstimator(_initial_estimate(cfg, truth), cfg.filter_force.without_noise(),
                                 _initial_population_cov(cfg), truth_epochs=truth_epochs)
    rows, detections = [], []
    for a in attrs:
        st = est.process_track(a)
        rows.append((st.estimate, st.covariance))
        if st.maneuver_detected:
            detections.append(st.first_track_index)
    return rows, detections, est.events, [], []


def pcrb_timeline(cfg: ScenarioConfig, truth: Truth, attrs, n_mc: int | None = None):
    """PCRB rows (track index, epoch, position sigma, velocity sigma, information matrix)
    at each track epoch, for the known mode sequence."""
    n_mc = cfg.pcrb_mc if n_mc is None else n_mc
    rng = np.random.default_rng(derive_seed(cfg.seed, 505))
    P0 = _initial_population_cov(cfg)
    J = np.linalg.inv(P0)
    force = cfg.filter_force.without_noise()
    x0 = truth.state_at(cfg.epoch0)
    draws = rng.multivariate_normal(np.zeros(6), P0, n_mc)
    t_prev = cfg.epoch0
    out = []
    q_rate = max(cfg.filter_force.noise_sigma, 1e-14) ** 2
    for k, a in enumerate(attrs):
        base = truth.state_at(t_prev).as_array()
        X = base + draws
        F = _fd_transition(X, truth.state_at(t_prev).srp_coeff, t_prev, a.epoch - t_prev, force)
        dt = a.epoch - t_prev
        Amat = sensitivity_matrix(truth.state_at(a.epoch))
        Q = q_rate * dt * Amat @ Amat.T
        burns = [e for e in truth.events if t_prev < e.epoch <= a.epoch]
        if burns:
            mag = max(np.linalg.norm(e.dv) for e in burns)
            Q = Q + (mag ** 2) * Amat @ Amat.T
        Q = Q + 1e-20 * np.eye(6)
        xa = truth.state_at(a.epoch).as_array()
        H = _fd_measurement(xa + draws, a)
        res = pcrb_recursion(J, [PcrbStep(F, Q, H, a.covariance, a.epoch)], t_prev,
                             check_symmetry=False)
        J = res.J[-1]
        sp, sv = position_velocity_sigma(xa, J, 500, derive_seed(cfg.seed, 506, k))
        out.append((k, a.epoch, sp, sv, J))
        t_prev = a.epoch
    return out


_FD_REL = 1e-7


def _fd_transition(X, B, t0, dt, cfg):
    n = X.shape[0]
    h = np.maximum(np.abs(X), 1.0) * _FD_REL
    h[:, 1:5] = 1e-7
    stacks = [X]
    for i in range(6):
        Y = X.copy()
        Y[:, i] += h[:, i]
        stacks.append(Y)
    allx = np.concatenate(stacks)
    y = propagate_array(allx, np.full(len(allx), B), t0, dt, cfg).reshape(7, n, 6)
    F = np.stack([(y[1 + i] - y[0]) / h[:, i:i + 1] for i in range(6)], axis=2)
    return F


def _fd_measurement(X, attr: Attributable):
    X = np.atleast_2d(X)
    rs, vs = attr.site.inertial(attr.epoch)
    out = []
    for x in X:
        cols = []
        for i in range(6):
            h = 1e-3 if i == 0 else 1e-8
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            zp = observe(*mee_to_rv(xp), rs, vs)
            zm = observe(*mee_to_rv(xm), rs, vs)
            d = zp - zm
            d[0] = wrap_angle(d[0])
            cols.append(d / (2 * h))
        out.append(np.stack(cols, axis=1))
    return np.array(out)


def run_end_to_end(cfg: ScenarioConfig, method: str, truth: Truth | None = None,
                   attrs=None, with_pcrb: bool = True) -> RunReport:
    method = method.upper()
    if method not in ("MHE", "MHE2", "SHF", "SHF2"):
        raise ValueError(f"unknown method {method}")
    truth = simulate_truth(cfg) if truth is None else truth
    attrs = generate_tracks(truth) if attrs is None else attrs
    table = truth_maneuver_table(truth, attrs)
    t0 = time.perf_counter()
    if method in ("SHF", "SHF2"):
        rows, det, events, records, spawn_log = _run_shf(cfg, truth, attrs, method == "SHF2")
    else:
        epochs = [e.epoch for e in truth.events] if method == "MHE2" else None
        if epochs is not None:
            # a pair of EWSK burns counts as one maneuver for the window reset
            epochs = [m[0] for m in truth.maneuvers()]
        rows, det, events, records, spawn_log = _run_mhe(cfg, truth, attrs, epochs)
    runtime = time.perf_counter() - t0
    detections, det_rows = score_detections(det, table)

    man_epochs = [m.first_epoch for m in table]
    epochs = [a.epoch for a in attrs]
    elapsed = elapsed_tracks(epochs, man_epochs)
    track_rows, est_cart, tru_cart, d2_rows = [], [], [], []
    for k, (a, (est, cov)) in enumerate(zip(attrs, rows)):
        tr = truth.state_at(a.epoch)
        tc = truth.cartesian_at(a.epoch)
        if est is None:
            ec = np.full(6, np.nan)
        else:
            ec = np.concatenate(mee_to_rv(est.as_array()))
        est_cart.append(ec)
        tru_cart.append(tc)
        row = {"track_index": k, "epoch_s": a.epoch, "site": a.site.name,
               "elapsed": int(elapsed[k]), "est": ec, "truth": tc,
               "pos_err_km": float(np.linalg.norm(ec[:3] - tc[:3])),
               "vel_err_km_s": float(np.linalg.norm(ec[3:] - tc[3:]))}
        if est is not None and cov is not None and np.all(np.isfinite(cov)):
            xt = tr.as_array()
            xt[5] = unwrap_to(xt[5], est.L)
            try:
                C = np.linalg.inv(cov)
                v = d2_metric(est.as_array(), xt, C)
                d2_rows.append((k, a.epoch, "filter", v))
            except np.linalg.LinAlgError:
                pass
        track_rows.append(row)
    est_cart, tru_cart = np.array(est_cart), np.array(tru_cart)
    ok = np.all(np.isfinite(est_cart), axis=1)
    rmse = rmse_by_elapsed_tracks(est_cart[ok], tru_cart[ok], man_epochs,
                                  epochs=np.asarray(epochs)[ok]) if ok.any() else []
    pcrb_rows = pcrb_timeline(cfg, truth, attrs) if with_pcrb and attrs else []
    for (k, epoch, _, _, J), (est, _) in zip(pcrb_rows, rows):
        if est is None:
            continue
        xt = truth.state_at(epoch).as_array()
        xt[5] = unwrap_to(xt[5], est.L)
        d2_rows.append((k, epoch, "pcrb", d2_metric(est.as_array(), xt, J)))
    d2_rows.sort(key=lambda r: (r[0], r[2]))
    return RunReport(method, cfg.seed, len(attrs), table, track_rows, detections, det_rows, rmse,
                     events, records, d2_rows, pcrb_rows, runtime, mean_reobservation_days(attrs),
                     spawn_log)


def empty_report(method: str, seed: int) -> RunReport:
    return RunReport(method, seed, 0, [], [], {"correct": 0, "delayed": 0, "missed": 0,
                                               "false": 0}, [], [], [], [], [], [], 0.0)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def emit_reports(report: RunReport, out_dir) -> list:
    """Write the run's event log, CSV tables and summary JSON; returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = []

    def path(name):
        p = os.path.join(out_dir, name)
        written.append(p)
        return p

    try:
        summary = {"method": report.method, "n_tracks": report.n_tracks,
                   "n_maneuvers": report.n_maneuvers,
                   "detections": {k: report.detections.get(k, 0)
                                  for k in ("correct", "delayed", "false")},
                   "missed": report.detections.get("missed", 0),
                   "runtime_s": report.runtime_s, "seed": report.seed}
        with open(path("summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        if report.n_tracks == 0:
            return written
        write_events(path("events.jsonl"), [_clean(e) for e in report.events])
        with open(path("estimates.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["track_index", "epoch_s", "site", "elapsed_tracks"]
                       + [f"est_{c}" for c in ("x", "y", "z", "vx", "vy", "vz")]
                       + [f"true_{c}" for c in ("x", "y", "z", "vx", "vy", "vz")]
                       + ["pos_err_km", "vel_err_km_s"])
            for r in report.track_rows:
                w.writerow([r["track_index"], repr(float(r["epoch_s"])), r["site"], r["elapsed"]]
                           + [repr(float(v)) for v in r["est"]]
                           + [repr(float(v)) for v in r["truth"]]
                           + [repr(r["pos_err_km"]), repr(r["vel_err_km_s"])])
        with open(path("detections.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["maneuver_epoch_s", "kind", "first_track_index", "detected_track_index",
                        "status"])
            for r in report.detection_rows:
                w.writerow([repr(float(r[0])), r[1], r[2], "" if r[3] is None else r[3], r[4]])
        with open(path("truth_maneuvers.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["first_epoch_s", "last_epoch_s", "kind", "first_track_index",
                        "detectable"])
            for m in report.truth_table:
                w.writerow([repr(m.first_epoch), repr(m.last_epoch), m.kind,
                            "" if m.first_track is None else m.first_track, int(m.detectable)])
        write_rmse(path("rmse_by_tracks.csv"), report.rmse)
        if report.pcrb_rows:
            write_pcrb(path("pcrb_timeline.csv"), [r[1] for r in report.pcrb_rows],
                       [r[2] for r in report.pcrb_rows], [r[3] for r in report.pcrb_rows])
        write_d2(path("d2_samples.csv"), report.d2_rows)
        write_records(path("maneuver_records.csv"), report.records)
    except OSError as exc:
        raise OSError(f"failed writing reports to {out_dir}: {exc}") from exc
    return written


def _clean(e: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in e.items()}
