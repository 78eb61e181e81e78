"""Control distance metric: linearized two-impulse transfer cost between orbits.

Element differences are made dimensionless (the semi-latus rectum change is
divided by the initial p) and a sixth row carries the phasing requirement:
the difference between the target true longitude at arrival and the one
reached ballistically. Its sensitivity to a burn at longitude L_j is the
immediate longitude change plus the along-track drift accumulated until
arrival, obtained by differentiating the two-body longitude map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .orbits import (
    MeeState, kepler_advance, mean_longitude, mean_motion, sensitivity_rows, time_between,
    true_longitude, wrap_angle,
)

DEFAULT_C1 = 1e8
GRID_PER_REV = 24
DESCENT_TOL = 1e-10


@dataclass(frozen=True)
class TransferProblem:
    oe_initial: MeeState
    oe_final: MeeState
    time_of_flight: float
    target_delta: np.ndarray
    L0: float
    Lf: float

    @classmethod
    def build(cls, pre: MeeState, post: MeeState, tof: float | None = None) -> "TransferProblem":
        tof = post.epoch - pre.epoch if tof is None else tof
        if not tof > 0:
            raise ValueError(f"time of flight must be positive, got {tof}")
        x0 = pre.as_array()
        L0 = x0[5]
        Lf = float(kepler_advance(x0, tof)[5])
        xf = post.as_array()
        target = np.array([
            (xf[0] - x0[0]) / x0[0], xf[1] - x0[1], xf[2] - x0[2], xf[3] - x0[3], xf[4] - x0[4],
            wrap_angle(xf[5] - Lf),
        ])
        return cls(pre, post, float(tof), target, float(L0), Lf)


@dataclass(frozen=True)
class TwoBurnSolution:
    dv1: np.ndarray
    dv2: np.ndarray
    L1: float
    L2: float
    cost: float
    J: float
    injection_residual: np.ndarray
    condition: float


def _arrival_longitude(x4, dt):
    """Two-body true longitude after ``dt`` from (p, f, g, L) in ``x4``."""
    p, f, g, L = (x4[..., i] for i in range(4))
    full = np.stack([p, f, g, np.zeros_like(p), np.zeros_like(p), L], axis=-1)
    lam = mean_longitude(full) + mean_motion(full) * dt
    return true_longitude(lam, f, g)


def mean_longitude_partials(L, f, g):
    """d(mean longitude)/d(f, g) at fixed true longitude, nonsingular at e = 0.

    Works through the eccentric longitude F, for which the mean longitude is
    F + g cos F - f sin F and the in-plane position is an explicit function
    of (F, f, g).
    """
    e2 = f * f + g * g
    eta = np.sqrt(1.0 - e2)
    beta = 1.0 / (1.0 + eta)
    th = L - np.arctan2(g, f)
    E = np.arctan2(eta * np.sin(th), np.sqrt(e2) + np.cos(th))
    F = L + wrap_angle(E - th)
    cF, sF = np.cos(F), np.sin(F)
    X = (1 - g * g * beta) * cF + f * g * beta * sF - f
    Y = (1 - f * f * beta) * sF + f * g * beta * cF - g
    XF = -(1 - g * g * beta) * sF + f * g * beta * cF
    YF = (1 - f * f * beta) * cF - f * g * beta * sF
    r2 = X * X + Y * Y
    dL_dF = (X * YF - Y * XF) / r2
    db = beta * beta / eta
    bf, bg = db * f, db * g
    Xf = -g * g * bf * cF + g * beta * sF + f * g * bf * sF - 1.0
    Yf = -(2 * f * beta + f * f * bf) * sF + (g * beta + f * g * bf) * cF
    Xg = -(2 * g * beta + g * g * bg) * cF + (f * beta + f * g * bg) * sF
    Yg = -f * f * bg * sF + f * beta * cF + f * g * bg * cF - 1.0
    dL_df = (X * Yf - Y * Xf) / r2
    dL_dg = (X * Yg - Y * Xg) / r2
    r_a = 1.0 - g * sF - f * cF
    return -sF - r_a * dL_df / dL_dF, cF - r_a * dL_dg / dL_dF


def _phase_gradient(x, dt):
    """d L_arrival / d(p, f, g, L) at ``x`` (``(..., 6)``) for coast time ``dt``."""
    p, f, g, L = x[..., 0], x[..., 1], x[..., 2], x[..., 5]
    n = mean_motion(x)
    Lf = true_longitude(mean_longitude(x) + n * dt, f, g)
    eta2 = 1.0 - f * f - g * g
    w0 = 1.0 + f * np.cos(L) + g * np.sin(L)
    wf = 1.0 + f * np.cos(Lf) + g * np.sin(Lf)
    dT = wf * wf / eta2**1.5
    f0, g0 = mean_longitude_partials(L, f, g)
    f1, g1 = mean_longitude_partials(Lf, f, g)
    drift = -3.0 * n * dt / eta2
    return np.stack([
        dT * (-1.5 * n * dt / p),
        dT * (f0 - f1 + drift * f),
        dT * (g0 - g1 + drift * g),
        (wf / w0) ** 2,
    ], axis=-1)


def burn_rows(base: MeeState | np.ndarray, L, dt_remaining, p_scale: float):
    """Rows (…, 6, 3) mapping a burn at ``L`` to the dimensionless target vector."""
    xb = base.as_array() if isinstance(base, MeeState) else np.asarray(base, dtype=float)
    L = np.asarray(L, dtype=float)
    x = np.broadcast_to(xb, L.shape + (6,)).copy()
    x[..., 5] = L
    A = sensitivity_rows(x)
    M = np.empty_like(A)
    M[..., 0, :] = A[..., 0, :] / p_scale
    M[..., 1:5, :] = A[..., 1:5, :]
    grad = _phase_gradient(x, dt_remaining)
    M[..., 5, :] = np.einsum("...i,...ij->...j", grad, A[..., [0, 1, 2, 5], :])
    return M


def linear_delta_oe(state: MeeState, dv) -> np.ndarray:
    """First-order MEE change (p, f, g, h, k, L) from an RTN impulse."""
    return sensitivity_rows(state.as_array()) @ np.asarray(dv, dtype=float)


def _solve_pairs(M1, M2, b, c1):
    """Batched optimal burns for burn matrices ``M1``/``M2`` (…, 6, 3) and targets ``b`` (…, 6)."""
    M1, M2 = np.broadcast_arrays(M1, M2)
    Ap = np.concatenate([M1, M2], axis=-1)
    At = np.swapaxes(Ap, -1, -2)
    N = np.eye(6) + c1 * (At @ Ap)
    b = np.broadcast_to(b, Ap.shape[:-1])
    rhs = c1 * (At @ b[..., None])
    dv = np.linalg.solve(N, rhs)[..., 0]
    res = b - (Ap @ dv[..., None])[..., 0]
    J = np.sum(dv * dv, axis=-1) + c1 * np.sum(res * res, axis=-1)
    return dv, res, J, N


class _Evaluator:
    """J(L1, L2) for K transfers sharing one initial orbit and time of flight."""

    def __init__(self, x0, tof: float, L0: float, Lf: float, xf, b, c1: float):
        self.x0 = np.asarray(x0, dtype=float)
        self.tof, self.L0, self.Lf = tof, L0, Lf
        self.xf = np.atleast_2d(xf)
        self.b = np.atleast_2d(b)
        self.c1 = c1
        self.p0 = self.x0[0]

    @classmethod
    def from_problem(cls, pb: TransferProblem, c1: float):
        return cls(pb.oe_initial.as_array(), pb.time_of_flight, pb.L0, pb.Lf,
                   pb.oe_final.as_array(), pb.target_delta, c1)

    def rows(self, base, L):
        dt = self.tof - time_between(self.x0, self.L0, L)
        return burn_rows(base, L, dt, self.p0)

    def evaluate(self, L1, L2, k):
        """Flat arrays of longitudes and problem indices; returns dv (m, 6), residual, J, N."""
        L1 = np.asarray(L1, dtype=float)
        L2 = np.asarray(L2, dtype=float)
        M1 = self.rows(self.x0, L1)
        M2 = self.rows(self.xf[k], L2)
        return _solve_pairs(M1, M2, self.b[k], self.c1)

    def J(self, L1, L2, k):
        return self.evaluate(L1, L2, k)[2]

    def grad(self, L1, L2, k, eps: float = 1e-6):
        """J and its exact gradient (m, 2) by the envelope theorem.

        At the optimal burns, dJ/dL_j = -2 c1 res^T (dM_j/dL_j) dv_j; the row
        derivative is a central difference of the smooth burn rows.
        """
        m = len(L1)
        R1 = self.rows(self.x0, np.concatenate([L1, L1 + eps, L1 - eps]))
        R2 = self.rows(self.xf[np.tile(k, 3)], np.concatenate([L2, L2 + eps, L2 - eps]))
        M1, M2 = R1[:m], R2[:m]
        dv, res, J, _ = _solve_pairs(M1, M2, self.b[k], self.c1)
        D1 = (R1[m:2 * m] - R1[2 * m:]) / (2 * eps)
        D2 = (R2[m:2 * m] - R2[2 * m:]) / (2 * eps)
        g1 = -2 * self.c1 * np.einsum("mi,mij,mj->m", res, D1, dv[:, :3])
        g2 = -2 * self.c1 * np.einsum("mi,mij,mj->m", res, D2, dv[:, 3:])
        return J, np.stack([g1, g2], -1)


def augmented_matrix(problem: TransferProblem, L1: float, L2: float) -> np.ndarray:
    """The 6x6 matrix [A1 | A2] whose product with the stacked burns gives the target change."""
    ev = _Evaluator.from_problem(problem, DEFAULT_C1)
    M1 = ev.rows(ev.x0, np.array([L1]))
    M2 = ev.rows(ev.xf[0], np.array([L2]))
    return np.concatenate([M1, M2], axis=-1)[0]


def _solution(ev: _Evaluator, k: int, L1: float, L2: float) -> TwoBurnSolution:
    dv, res, J, N = ev.evaluate(np.array([L1]), np.array([L2]), np.array([k]))
    dv = dv[0]
    return TwoBurnSolution(dv[:3], dv[3:], float(L1), float(L2),
                           float(np.linalg.norm(dv[:3]) + np.linalg.norm(dv[3:])),
                           float(J[0]), res[0], float(np.linalg.cond(N[0])))


def solve_two_burn(problem: TransferProblem, L1: float, L2: float,
                   c1: float = DEFAULT_C1) -> TwoBurnSolution:
    """Optimal burns at fixed longitudes (closed-form regularized least squares)."""
    if not problem.L0 - 1e-12 <= L1 <= L2 <= problem.Lf + 1e-12:
        raise ValueError("burn longitudes must satisfy L0 <= L1 <= L2 <= Lf")
    return _solution(_Evaluator.from_problem(problem, c1), 0, L1, L2)


def _project(L1, L2, lo, hi):
    """Euclidean projection onto the triangle lo <= L1 <= L2 <= hi."""
    swap = L1 > L2
    mid = 0.5 * (L1 + L2)
    L1 = np.clip(np.where(swap, mid, L1), lo, hi)
    L2 = np.clip(np.where(swap, mid, L2), lo, hi)
    return L1, L2


_HD = 1e-4
_MAX_HALVINGS = 12


def _directions(g, h11, h22, h12, L1, L2, lo, hi):
    """Candidate search directions (m, 4, 2).

    Full Newton (steepest descent when the Hessian is indefinite), diagonal
    Newton on the coordinates not pinned at a bound, steepest descent, and a
    move along the L1 = L2 edge. Trying all of them keeps the iteration from
    stalling where the projection clips the Newton step.
    """
    det = h11 * h22 - h12 * h12
    pd = (h11 > 0) & (det > 0)
    gnorm = np.max(np.abs(g), axis=-1, keepdims=True)
    steep = -0.5 * g / np.where(gnorm > 0, gnorm, 1.0)
    safe = np.where(pd, det, 1.0)
    newton = -np.stack([h22 * g[..., 0] - h12 * g[..., 1], h11 * g[..., 1] - h12 * g[..., 0]], -1) / safe[..., None]
    newton = np.where(pd[..., None], newton, steep)
    pinned1 = ((L1 <= lo) & (g[..., 0] > 0)) | ((L1 >= L2) & (g[..., 0] < 0))
    pinned2 = ((L2 >= hi) & (g[..., 1] < 0)) | ((L2 <= L1) & (g[..., 1] > 0))
    hd = np.stack([h11, h22], -1)
    diag = np.where(hd > 0, -g / np.where(hd > 0, hd, 1.0), steep)
    diag = np.where(np.stack([pinned1, pinned2], -1), 0.0, diag)
    he = h11 + 2 * h12 + h22
    ge = g[..., 0] + g[..., 1]
    te = np.where(he > 0, -ge / np.where(he > 0, he, 1.0), -0.5 * np.sign(ge))
    edge = np.stack([te, te], -1)
    return np.stack([newton, diag, steep, edge], -2)


def _descend(ev: _Evaluator, L1, L2, J, k, tol=DESCENT_TOL, maxiter=60):
    """Projected descent from flat arrays of starting points (problem index ``k``).

    Gradients are exact (envelope theorem); the Hessian is a forward
    difference of the gradient. Each candidate direction is backtracked
    along the projected path and the lowest point meeting the Armijo
    condition is taken. Only points still making progress are evaluated.
    """
    L1, L2, J = L1.astype(float), L2.astype(float), J.astype(float)
    active = np.flatnonzero(J > 0.0)
    nd = 4
    for _ in range(maxiter):
        if active.size == 0:
            break
        a1, a2, ak = L1[active], L2[active], k[active]
        m = active.size
        Js, G = ev.grad(np.concatenate([a1, a1 + _HD, a1]), np.concatenate([a2, a2, a2 + _HD]),
                        np.tile(ak, 3))
        aJ, g = Js[:m], G[:m]
        h11 = (G[m:2 * m, 0] - g[:, 0]) / _HD
        h22 = (G[2 * m:, 1] - g[:, 1]) / _HD
        h12 = 0.5 * ((G[m:2 * m, 1] - g[:, 1]) + (G[2 * m:, 0] - g[:, 0])) / _HD
        d = _directions(g, h11, h22, h12, a1, a2, ev.L0, ev.Lf)
        new1, new2, newJ = a1.copy(), a2.copy(), aJ.copy()
        pending = np.arange(m)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            if pending.size == 0:
                break
            C1, C2 = _project(a1[pending, None] + t * d[pending, :, 0],
                              a2[pending, None] + t * d[pending, :, 1], ev.L0, ev.Lf)
            Jc = ev.J(C1.ravel(), C2.ravel(), np.repeat(ak[pending], nd)).reshape(-1, nd)
            dec = (g[pending, None, 0] * (a1[pending, None] - C1)
                   + g[pending, None, 1] * (a2[pending, None] - C2))
            ok = (Jc <= aJ[pending, None] - 1e-4 * dec) & (Jc < aJ[pending, None])
            Jm = np.where(ok, Jc, np.inf)
            pick = np.argmin(Jm, axis=-1)
            hit = ok.any(axis=-1)
            rows = np.arange(pending.size)[hit]
            idx = pending[hit]
            new1[idx] = C1[rows, pick[hit]]
            new2[idx] = C2[rows, pick[hit]]
            newJ[idx] = Jm[rows, pick[hit]]
            pending = pending[~hit]
            t *= 0.5
        gain = aJ - newJ
        L1[active], L2[active], J[active] = new1, new2, newJ
        keep = (gain > 0) & (gain > tol * newJ)
        active = active[keep]
    return L1, L2, J


def grid_nodes(L0: float, Lf: float, per_rev: int = GRID_PER_REV) -> np.ndarray:
    span = Lf - L0
    n = max(2, int(math.ceil(span / (2.0 * math.pi / per_rev))) + 1)
    return np.linspace(L0, Lf, n)


def _optimize(ev: _Evaluator, per_rev: int, n_starts: int, maxiter: int = 60):
    """Best (L1, L2, J) per transfer, arrays of shape (K,)."""
    nodes = grid_nodes(ev.L0, ev.Lf, per_rev)
    i, j = np.triu_indices(len(nodes))
    K = ev.b.shape[0]
    M1 = ev.rows(ev.x0, nodes)[i][None]
    M2 = ev.rows(ev.xf[:, None, :], np.broadcast_to(nodes, (K, len(nodes))))[:, j]
    Jg = _solve_pairs(M1, M2, ev.b[:, None, :], ev.c1)[2]
    spacing = nodes[1] - nodes[0]
    starts = np.zeros((K, n_starts), dtype=int)
    for k in range(K):
        order = np.argsort(Jg[k], kind="stable")
        chosen = [order[0]]
        for idx in order[1:]:
            if len(chosen) == n_starts:
                break
            if all(max(abs(nodes[i[idx]] - nodes[i[c]]), abs(nodes[j[idx]] - nodes[j[c]])) > 1.5 * spacing
                   for c in chosen):
                chosen.append(idx)
        chosen += [chosen[0]] * (n_starts - len(chosen))
        starts[k] = chosen
    kk = np.repeat(np.arange(K), n_starts)
    flat = starts.ravel()
    D1, D2, DJ = _descend(ev, nodes[i[flat]], nodes[j[flat]], Jg[kk, flat], kk, maxiter=maxiter)
    D1, D2, DJ = (a.reshape(K, n_starts) for a in (D1, D2, DJ))
    best = np.argmin(DJ, axis=-1)[:, None]
    take = lambda a: np.take_along_axis(a, best, -1)[:, 0]
    return take(D1), take(D2), take(DJ)


def optimize_longitudes(problem: TransferProblem, c1: float = DEFAULT_C1,
                        per_rev: int = GRID_PER_REV, n_starts: int = 6) -> TwoBurnSolution:
    """Best (L1, L2) by triangle grid search followed by projected descent."""
    if problem.time_of_flight < 0:
        raise ValueError("negative time of flight")
    ev = _Evaluator.from_problem(problem, c1)
    L1, L2, _ = _optimize(ev, per_rev, n_starts)
    return _solution(ev, 0, float(L1[0]), float(L2[0]))


def control_distance(pre_orbit: MeeState, post_orbit: MeeState, tof: float | None = None,
                     c1: float = DEFAULT_C1) -> float:
    """Sum of the two optimized burn magnitudes (km/s)."""
    problem = TransferProblem.build(pre_orbit, post_orbit, tof)
    return optimize_longitudes(problem, c1).cost


def control_distance_batch(pre_orbit: MeeState, post_states, tof: float,
                           c1: float = DEFAULT_C1, per_rev: int = GRID_PER_REV,
                           n_starts: int = 4, maxiter: int = 60) -> np.ndarray:
    """Control distance from one pre-maneuver orbit to each row of ``post_states`` (K, 6).

    Post states are taken at ``pre_orbit.epoch + tof``.
    """
    if not tof > 0:
        raise ValueError(f"time of flight must be positive, got {tof}")
    xf = np.atleast_2d(np.asarray(post_states, dtype=float))
    x0 = pre_orbit.as_array()
    Lf = float(kepler_advance(x0, tof)[5])
    b = np.empty_like(xf)
    b[:, 0] = (xf[:, 0] - x0[0]) / x0[0]
    b[:, 1:5] = xf[:, 1:5] - x0[1:5]
    b[:, 5] = wrap_angle(xf[:, 5] - Lf)
    ev = _Evaluator(x0, float(tof), float(x0[5]), Lf, xf, b, c1)
    L1, L2, _ = _optimize(ev, per_rev, n_starts, maxiter)
    dv = ev.evaluate(L1, L2, np.arange(len(xf)))[0]
    return np.linalg.norm(dv[:, :3], axis=-1) + np.linalg.norm(dv[:, 3:], axis=-1)
