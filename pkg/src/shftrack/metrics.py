"""Evaluation: RMSE by elapsed tracks, PCRB recursion and d^2 consistency."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .orbits import mee_to_rv, wrap_angle

RIDGE = 1e-12


# ---------------------------------------------------------------------------
# RMSE


@dataclass
class RmseRow:
    n_tracks: int
    pos_rmse: float
    vel_rmse: float
    count: int


def elapsed_tracks(epochs, maneuver_epochs):
    """Tracks elapsed since the latest maneuver (1 = first post-maneuver track); 0 if none."""
    man = np.sort(np.asarray(list(maneuver_epochs), dtype=float))
    out = np.zeros(len(epochs), dtype=int)
    last, count = None, 0
    for i, t in enumerate(epochs):
        j = np.searchsorted(man, t, side="left") - 1
        m = man[j] if j >= 0 else None
        if m is None:
            continue
        count = count + 1 if m == last else 1
        last = m
        out[i] = count
    return out


def rmse_by_elapsed_tracks(estimates, truths, maneuver_epochs, epochs=None) -> list:
    """Position/velocity RMSE grouped by tracks since the most recent maneuver.

    ``estimates`` and ``truths`` are ``(K, 6)`` Cartesian arrays (km, km/s) at
    aligned ``epochs``.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.atleast_2d(np.asarray(truths, dtype=float))
    if est.shape != tru.shape:
        raise ValueError("estimates and truths are not aligned")
    if epochs is None:
        raise ValueError("epochs are required to count elapsed tracks")
    n = elapsed_tracks(epochs, maneuver_epochs)
    dp = np.linalg.norm(est[:, :3] - tru[:, :3], axis=1)
    dv = np.linalg.norm(est[:, 3:6] - tru[:, 3:6], axis=1)
    rows = []
    for k in sorted(set(n[n > 0].tolist())):
        m = n == k
        rows.append(RmseRow(k, float(np.sqrt(np.mean(dp[m] ** 2))),
                            float(np.sqrt(np.mean(dv[m] ** 2))), int(m.sum())))
    return rows


# ---------------------------------------------------------------------------
# PCRB


@dataclass
class PcrbStep:
    """One step of the information recursion.

    ``F`` holds the transition Jacobians of the Monte Carlo truth draws
    ``(n_mc, n, n)``, ``H`` the measurement Jacobians ``(n_mc, m, n)`` or None
    for a step without a measurement; ``Q`` and ``R`` are the process and
    measurement noise covariances.
    """
    F: np.ndarray
    Q: np.ndarray
    H: np.ndarray | None = None
    R: np.ndarray | None = None
    epoch: float = 0.0


@dataclass
class PcrbResult:
    J: list
    epochs: list
    flagged: list = field(default_factory=list)

    def covariances(self):
        return [np.linalg.inv(J) for J in self.J]


def _inv(M, flagged, k):
    try:
        np.linalg.cholesky(M)
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        flagged.append(k)
        return np.linalg.inv(M + RIDGE * np.eye(len(M)))


def pcrb_recursion(J0, steps, epoch0: float = 0.0, check_symmetry: bool = True) -> PcrbResult:
    """J_{k+1} = D22 - D21 (J_k + D11)^-1 D12 with expectations over the Jacobian draws."""
    J = np.array(J0, dtype=float)
    out, epochs, flagged = [J.copy()], [epoch0], []
    for k, s in enumerate(steps):
        F = np.asarray(s.F, dtype=float)
        if F.ndim == 2:
            F = F[None]
        Qi = np.linalg.inv(s.Q)
        D11 = np.mean(np.einsum("kji,jl,klm->kim", F, Qi, F), axis=0)
        D12 = -np.mean(np.einsum("kji,jl->kil", F, Qi), axis=0)
        D22 = Qi.copy()
        if s.H is not None:
            H = np.asarray(s.H, dtype=float)
            if H.ndim == 2:
                H = H[None]
            Ri = np.linalg.inv(s.R)
            D22 = D22 + np.mean(np.einsum("kji,jl,klm->kim", H, Ri, H), axis=0)
        corr = D12.T @ _inv(J + D11, flagged, k) @ D12
        Jn = D22 - corr
        if check_symmetry:
            asym = np.max(np.abs(Jn - Jn.T))
            # relative to the terms, since D22 and the correction can nearly cancel
            scale = max(1.0, float(np.max(np.abs(D22))), float(np.max(np.abs(corr))))
            if asym > 1e-12 * scale:
                raise FloatingPointError(f"information matrix asymmetry {asym:g}")
        J = 0.5 * (Jn + Jn.T)
        out.append(J.copy())
        epochs.append(s.epoch)
    return PcrbResult(out, epochs, flagged)


def position_velocity_sigma(mean_mee, J, n_samples: int = 2000, seed: int = 0):
    """RMS position/velocity sigma of MEE draws from N(mean, J^-1)."""
    cov = np.linalg.inv(J)[:6, :6]
    lam, V = np.linalg.eigh(0.5 * (cov + cov.T))
    # round-off can leave tiny negative eigenvalues in an ill-conditioned inverse
    root = V * np.sqrt(np.clip(lam, 0.0, None))
    rng = np.random.default_rng(seed)
    x = np.asarray(mean_mee)[:6] + rng.standard_normal((n_samples, 6)) @ root.T
    pos, vel = mee_to_rv(x)
    sp = float(np.sqrt(np.sum(pos.var(axis=0))))
    sv = float(np.sqrt(np.sum(vel.var(axis=0))))
    return sp, sv


# ---------------------------------------------------------------------------
# consistency


def d2(estimate_mean, truth, C) -> float:
    """(x - x_hat)^T C (x - x_hat), MEE with L wrapped to the nearest branch."""
    diff = np.asarray(truth, dtype=float) - np.asarray(estimate_mean, dtype=float)
    if diff.shape[-1] >= 6:
        diff = diff.copy()
        diff[5] = wrap_angle(diff[5])
    return float(diff @ np.asarray(C, dtype=float) @ diff)


@dataclass
class Chi2Consistency:
    ks_statistic: float
    p_value: float
    skewness_excess: float


def chi2_consistency(d2_samples, dof: int) -> Chi2Consistency:
    """KS test against chi-square(dof) plus a skewness excess.

    The skewness is the third moment about the reference mean ``dof`` in
    units of the reference standard deviation ``sqrt(2 dof)``, so it grows
    when d^2 is inflated (optimistic covariance) and turns negative when it
    is deflated; the chi-square value sqrt(8/dof) is subtracted.
    """
    s = np.asarray(d2_samples, dtype=float)
    if len(s) < 30:
        raise ValueError("need at least 30 samples")
    ks = stats.kstest(s, stats.chi2(dof).cdf)
    m3 = float(np.mean((s - dof) ** 3)) / (2.0 * dof) ** 1.5
    return Chi2Consistency(float(ks.statistic), float(ks.pvalue), m3 - math.sqrt(8.0 / dof))


# ---------------------------------------------------------------------------
# outputs


def write_rmse(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_tracks", "pos_rmse_km", "vel_rmse_km_s", "count"])
        for r in rows:
            w.writerow([r.n_tracks, repr(r.pos_rmse), repr(r.vel_rmse), r.count])


def write_pcrb(path, epochs, sig_pos, sig_vel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch_s", "sigma_pos_km", "sigma_vel_km_s"])
        for e, p, v in zip(epochs, sig_pos, sig_vel):
            w.writerow([repr(float(e)), repr(float(p)), repr(float(v))])


def write_d2(path, rows) -> None:
    """rows: (track_index, epoch_s, source, d2)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["track_index", "epoch_s", "source", "d2"])
        for k, e, src, v in rows:
            w.writerow([k, repr(float(e)), src, repr(float(v))])
