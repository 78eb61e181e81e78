"""Moving-horizon batch least-squares baseline (MHE) and its truth-epoch variant."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .admissible_region import SAMPLING_SEARCH, effective_pre_orbit, x_opt
from .control_metric import control_distance_batch
from .forces import ForceModelConfig
from .observation import Attributable, observe, range_and_rate, residual, state_from_range
from .orbits import (MeeState, kepler_advance, kepler_propagate, mee_to_cart, mee_to_rv,
                     rv_to_mee, unwrap_to)
from .propagation import propagate_array

MAX_WINDOW = 6
MAX_ITER = 25
STEP_TOL = 1e-10
C_P = 1.0 / (1e-3) ** 2  # a 1 m/s control distance costs one measurement sigma squared
# finite-difference steps per MEE component (km, -, -, -, -, rad)
FD_STEP = np.array([1e-3, 1e-8, 1e-8, 1e-8, 1e-8, 1e-8])


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class FitResult:
    state: MeeState
    covariance: np.ndarray
    cost: float
    iterations: int
    converged: bool
    gradient: np.ndarray
    n_meas: int
    meas_cost: float = 0.0


def _whiteners(attrs):
    return [np.linalg.cholesky(np.linalg.inv(a.covariance)).T for a in attrs]


def propagate_stencil(x, B, t0, epochs, cfg):
    """States of each row of ``x`` at each epoch: ``(len(epochs), K, 6)``, chained in time."""
    out = np.empty((len(epochs), x.shape[0], 6))
    cur, t = np.array(x, dtype=float), t0
    for j, e in enumerate(epochs):
        if e > t:
            cur = propagate_array(cur, B, t, e - t, cfg)
            t = e
        out[j] = cur
    return out


def _residuals(x, B, t0, attrs, W, cfg):
    """Whitened residual vectors for each row of ``x``: ``(K, 4 n)``."""
    epochs = [a.epoch for a in attrs]
    states = propagate_stencil(x, np.full(len(x), B), t0, epochs, cfg)
    cols = []
    for j, a in enumerate(attrs):
        pos, vel = mee_to_rv(states[j])
        rs, vs = a.site.inertial(a.epoch)
        r = residual(a.z, observe(pos, vel, rs, vs))
        cols.append(r @ W[j].T)
    return np.concatenate(cols, axis=1)


def _stencil(x0):
    pts = [x0]
    for i in range(6):
        for s in (1.0, -1.0):
            y = x0.copy()
            y[i] += s * FD_STEP[i]
            pts.append(y)
    return np.array(pts)


def _gauss_newton(residual_fn, x0, n_meas):
    x = np.array(x0, dtype=float)
    rows = residual_fn(_stencil(x))
    r = rows[0]
    cost = float(r @ r)
    converged = False
    it = 0
    J = None
    for it in range(1, MAX_ITER + 1):
        J = np.stack([(rows[1 + 2 * i] - rows[2 + 2 * i]) / (2 * FD_STEP[i]) for i in range(6)],
                     axis=1)
        N = J.T @ J
        _check_rank(N)
        try:
            step = -np.linalg.solve(N, J.T @ r)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientError(str(exc)) from exc
        lam = 1.0
        for _ in range(30):
            xn = x + lam * step
            rows_n = residual_fn(_stencil(xn))
            cn = float(rows_n[0] @ rows_n[0])
            if cn <= cost:
                break
            lam *= 0.5
        else:
            converged = True
            break
        x, rows, r, cost = xn, rows_n, rows_n[0], cn
        rel = lam * step / np.array([x[0], 1.0, 1.0, 1.0, 1.0, 1.0])
        if np.linalg.norm(rel) < STEP_TOL:
            converged = True
            break
    J = np.stack([(rows[1 + 2 * i] - rows[2 + 2 * i]) / (2 * FD_STEP[i]) for i in range(6)], axis=1)
    _check_rank(J.T @ J)
    cov = np.linalg.inv(J.T @ J)
    return x, cov, r, it, converged, J.T @ r


def _check_rank(N, max_cond: float = 1e14):
    d = np.sqrt(np.abs(np.diag(N)))
    if np.any(d == 0) or not np.all(np.isfinite(N)):
        raise RankDeficientError("normal matrix is singular")
    if np.linalg.cond(N / np.outer(d, d)) > max_cond:
        raise RankDeficientError("normal matrix is rank deficient")


def _result(x, B, t0, cov, r, it, conv, g, n_meas):
    return FitResult(MeeState.from_array(x, srp_coeff=B, epoch=t0), cov, float(r @ r), it, conv,
                     g, n_meas, float(r[:n_meas] @ r[:n_meas]))


def fit_window(window, initial: MeeState, cfg: ForceModelConfig, B: float | None = None) -> FitResult:
    """Gauss-Newton fit of the MEE state at ``initial.epoch`` to the window's attributables."""
    attrs = sorted(window, key=lambda a: a.epoch)
    if len(attrs) < 2:
        raise ValueError("fit_window needs at least two attributables")
    B = initial.srp_coeff if B is None else B
    W = _whiteners(attrs)
    t0 = initial.epoch
    fn = lambda X: _residuals(X, B, t0, attrs, W, cfg)
    x, cov, r, it, conv, g = _gauss_newton(fn, initial.as_array(), 4 * len(attrs))
    return _result(x, B, t0, cov, r, it, conv, g, 4 * len(attrs))


def _candidate_from_track(pre_eff: MeeState, attr: Attributable, tof: float):
    rho, rr, P = x_opt(pre_eff, attr, tof, center=_center_guess(pre_eff, attr, tof))
    c = state_from_range(attr, rho, rr)
    x = rv_to_mee(c.position, c.velocity)
    x[5] = unwrap_to(x[5], kepler_advance(pre_eff.as_array(), tof)[5])
    return x, rho, rr, P


def _center_guess(pre_eff, attr, tof):
    return range_and_rate(mee_to_cart(kepler_propagate(pre_eff, tof)), attr.site, attr.epoch)


def post_maneuver_fit(pre_orbit: MeeState, post_tracks, cfg: ForceModelConfig,
                      c_p: float = C_P, B: float | None = None) -> FitResult:
    """Post-maneuver estimate at the first post track, penalized by c_P P^2 from ``pre_orbit``.

    With one track this is the control-distance minimizer along the attributable.
    """
    attrs = sorted(post_tracks, key=lambda a: a.epoch)
    if not attrs:
        raise ValueError("need at least one post-maneuver attributable")
    B = pre_orbit.srp_coeff if B is None else B
    t0 = attrs[0].epoch
    tof = t0 - pre_orbit.epoch
    pre_eff = effective_pre_orbit(pre_orbit, tof, cfg)
    x0, rho, rr, P = _candidate_from_track(pre_eff, attrs[0], tof)
    if len(attrs) == 1:
        cov = np.full((6, 6), np.nan)
        return FitResult(MeeState.from_array(x0, srp_coeff=B, epoch=t0), cov, c_p * P * P, 0,
                         True, np.zeros(6), 4, 0.0)
    W = _whiteners(attrs)
    sq = math.sqrt(c_p)
    Lf = kepler_advance(pre_eff.as_array(), tof)[5]

    def fn(X):
        r = _residuals(X, B, t0, attrs, W, cfg)
        if c_p == 0:
            return r
        Y = X.copy()
        Y[:, 5] = unwrap_to(Y[:, 5], Lf)
        P = control_distance_batch(pre_eff, Y, tof, **SAMPLING_SEARCH)
        return np.concatenate([r, sq * P[:, None]], axis=1)

    x, cov, r, it, conv, g = _gauss_newton(fn, x0, 4 * len(attrs))
    return _result(x, B, t0, cov, r, it, conv, g, 4 * len(attrs))


def map_to_epoch(fit: FitResult, epoch: float, cfg: ForceModelConfig):
    """Fit state and covariance mapped to ``epoch`` with a finite-difference transition matrix."""
    st = _stencil(fit.state.as_array())
    y = propagate_stencil(st, np.full(len(st), fit.state.srp_coeff), fit.state.epoch, [epoch],
                          cfg)[0]
    Phi = np.stack([(y[1 + 2 * i] - y[2 + 2 * i]) / (2 * FD_STEP[i]) for i in range(6)], axis=1)
    cov = Phi @ fit.covariance @ Phi.T if np.all(np.isfinite(fit.covariance)) else None
    return MeeState.from_array(y[0], srp_coeff=fit.state.srp_coeff, epoch=epoch), cov


@dataclass
class MheStep:
    track_index: int
    epoch: float
    estimate: MeeState
    covariance: np.ndarray | None
    maneuver_detected: bool = False
    first_track_index: int | None = None
    cost: float = 0.0


@dataclass
class MovingHorizonEstimator:
    """Sliding-window estimator; ``truth_epochs`` switches on the truth-epoch variant."""
    initial: MeeState
    cfg: ForceModelConfig
    initial_cov: np.ndarray | None = None
    truth_epochs: list | None = None
    gate_prob: float = 0.9973
    c_p: float = C_P
    window: list = field(default_factory=list)
    post_mode: bool = False
    pre_orbit: MeeState | None = None
    estimate: MeeState | None = None
    fit: FitResult | None = None
    track_count: int = 0
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.estimate = self.initial

    def _fit(self, window):
        if self.post_mode and self.c_p > 0 and len(window) < 3:
            return post_maneuver_fit(self.pre_orbit, window, self.cfg, self.c_p)
        guess, _ = map_to_epoch(self.fit, window[0].epoch, self.cfg) if self.fit else (
            self._predict(window[0].epoch), None)
        return fit_window(window, guess, self.cfg)

    def _predict(self, epoch):
        x = propagate_stencil(self.estimate.as_array()[None], np.array([self.estimate.srp_coeff]),
                              self.estimate.epoch, [epoch], self.cfg)[0, 0]
        return MeeState.from_array(x, srp_coeff=self.estimate.srp_coeff, epoch=epoch)

    def _maneuver_between(self, a: float, b: float) -> bool:
        return any(a < t <= b for t in (self.truth_epochs or ()))

    def _reset(self, attr, k):
        self.pre_orbit = self.estimate
        self.window = [attr]
        self.post_mode = True
        self.fit = None
        self.fit = post_maneuver_fit(self.pre_orbit, self.window, self.cfg, self.c_p)
        self.events.append({"type": "promote", "track_index": k, "epoch_s": attr.epoch,
                            "first_track_index": k, "detection_epoch_s": attr.epoch})

    def process_track(self, attr: Attributable) -> MheStep:
        k = self.track_count
        self.track_count += 1
        detected = False
        last_epoch = self.window[-1].epoch if self.window else self.estimate.epoch
        if self.truth_epochs is not None:
            if self._maneuver_between(last_epoch, attr.epoch):
                self._reset(attr, k)
                detected = True
            else:
                self._extend(attr)
        else:
            trial = (self.window + [attr])[-MAX_WINDOW:]
            ok, fit = self._try(trial)
            if ok:
                self.window, self.fit = trial, fit
            else:
                self._reset(attr, k)
                detected = True
        self.estimate, cov = map_to_epoch(self.fit, attr.epoch, self.cfg)
        return MheStep(k, attr.epoch, self.estimate, cov, detected, k if detected else None,
                       self.fit.cost)

    def _extend(self, attr):
        self.window = (self.window + [attr])[-MAX_WINDOW:]
        if len(self.window) >= 2:
            self.fit = self._fit(self.window)
            if self.post_mode and len(self.window) >= 3:
                self.post_mode = False
        else:
            self.fit = _prior_fit(self._predict(attr.epoch), self.initial_cov)

    def _try(self, trial):
        """Fit the trial window; reject when the cost fails the chi-square gate."""
        if len(trial) < 2:
            pred = self._predict(trial[-1].epoch)
            a = trial[-1]
            pos, vel = mee_to_rv(pred.as_array())
            rs, vs = a.site.inertial(a.epoch)
            r = residual(a.z, observe(pos, vel, rs, vs))
            d2 = float(r @ np.linalg.solve(a.covariance, r))
            return d2 <= chi2.ppf(self.gate_prob, 4), _prior_fit(pred, self.initial_cov)
        try:
            fit = self._fit(trial)
        except (np.linalg.LinAlgError, ValueError):
            return False, None
        dof = max(fit.n_meas - 6, 1)
        ok = fit.meas_cost <= chi2.ppf(self.gate_prob, dof)
        if ok and self.post_mode and len(trial) >= 3:
            self.post_mode = False
        return ok, fit


def _prior_fit(state: MeeState, cov):
    c = np.full((6, 6), np.nan) if cov is None else np.asarray(cov, dtype=float)
    return FitResult(state, c, 0.0, 0, True, np.zeros(6), 0, 0.0)
