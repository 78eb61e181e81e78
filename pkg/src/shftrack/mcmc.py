"""Posterior sampling over the admissible region: MH kernel and a DE-MC ensemble."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .admissible_region import AdmissibleRegion, control_cost, in_box, points_to_mee
from .filters import derive_seed, gaussian_loglik
from .observation import Attributable
from .orbits import MeeState, aei

GAMMA_JUMP_EVERY = 10
JITTER_REL = 1e-6
LOW_ACCEPTANCE = 0.02


class ConfigurationError(ValueError):
    pass


def default_kappa(p_adm: float) -> float:
    """One decade of density penalty at the admissible boundary."""
    return math.log(10.0) / p_adm


@dataclass
class LogPosterior:
    """Log-density over (alpha, delta, alpha_rate, delta_rate, rho, rho_rate).

    ``mode='control'`` penalizes the control distance by ``kappa``; ``mode='heuristic'``
    adds the log of the maneuver-history density at the implied (da, de, di).
    """
    mode: str
    attr: Attributable
    region: AdmissibleRegion
    kappa: float | None = None
    kappa_h: float = 1.0
    kde: object = None
    search: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("control", "heuristic"):
            raise ConfigurationError(f"unknown posterior mode {self.mode!r}")
        if self.mode == "control":
            if self.kappa is None:
                self.kappa = default_kappa(self.region.p_adm)
            if not self.kappa >= 0:
                raise ConfigurationError("kappa must be nonnegative")
        else:
            if self.kde is None or len(getattr(self.kde, "records", ())) == 0:
                raise ConfigurationError("heuristic posterior needs a nonempty maneuver KDE")
            if not self.kappa_h > 0:
                raise ConfigurationError("kappa_h must be positive")

    @property
    def bounds(self) -> np.ndarray:
        return self.region.bounds

    def loglik(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        return gaussian_loglik(self.attr.z, pts[:, :4], self.attr.covariance)

    def xi(self, points) -> np.ndarray:
        post = aei(points_to_mee(points, self.attr))
        return post - aei(self.region.pre_orbit.as_array())

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), -np.inf)
        inside = in_box(self.bounds, pts)
        if not inside.any():
            return out
        q = pts[inside]
        ll = self.loglik(q)
        if self.mode == "control":
            P = control_cost(self.region.pre_orbit, self.attr, self.region.tof, q, **self.search)
            val = ll - self.kappa * P
        else:
            with np.errstate(divide="ignore"):
                val = ll + np.log(self.kappa_h * self.kde.eval(self.xi(q)))
        out[inside] = np.where(np.isnan(val), -np.inf, val)
        return out


def log_posterior_eval(lp, point) -> float:
    return float(lp(np.atleast_2d(point))[0])


def mh_step(state, log_density: float, proposal_cov, lp, rng):
    """One Gaussian random-walk Metropolis step. Returns (state, log_density, accepted)."""
    state = np.asarray(state, dtype=float)
    L = np.linalg.cholesky(proposal_cov)
    prop = state + L @ rng.standard_normal(state.shape[-1])
    lq = float(lp(prop[None])[0])
    if np.isfinite(lq) and math.log(rng.random()) <= lq - log_density:
        return prop, lq, True
    return state, log_density, False


def gamma_for(generation: int, gamma_scale: float = 1.0, dim: int = 6) -> float:
    if generation > 0 and generation % GAMMA_JUMP_EVERY == 0:
        return 1.0
    return gamma_scale * 2.38 / math.sqrt(2 * dim)


def demc_propose(states, chain_index: int, gamma: float, rng, widths):
    """x_i + gamma (x_r1 - x_r2) + e with r1, r2, i distinct."""
    states = np.asarray(states, dtype=float)
    n, d = states.shape
    if n < 4:
        raise ValueError("DE-MC needs at least 4 chains")
    others = [j for j in range(n) if j != chain_index]
    r1, r2 = rng.choice(others, size=2, replace=False)
    e = JITTER_REL * np.asarray(widths) * rng.standard_normal(d)
    return states[chain_index] + gamma * (states[r1] - states[r2]) + e


def split_rhat(chains) -> np.ndarray:
    """Split-chain potential scale reduction per dimension; ``chains`` is (n_chains, n_iter, d)."""
    c = np.asarray(chains, dtype=float)
    half = c.shape[1] // 2
    s = np.concatenate([c[:, :half], c[:, half:2 * half]], axis=0)
    n = s.shape[1]
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var = (n - 1) / n * W + B / n
    return np.sqrt(var / W)


@dataclass
class ChainResult:
    draws: np.ndarray
    log_density: np.ndarray
    acceptance: float
    rhat: np.ndarray
    low_acceptance: bool
    trace: np.ndarray | None = None
    trace_log: np.ndarray | None = None


def run_chains(lp, region, n_chains: int = 24, n_generations: int = 400,
               burn_in_fraction: float = 0.5, rng_seed: int = 0, n_draws: int = 1000,
               gamma_scale: float = 1.0, keep_trace: bool = False, max_init_tries: int = 200):
    """DE-MC over the region box; returns pooled, thinned post-burn-in draws.

    ``region`` is an AdmissibleRegion or a (d, 2) bounds array; ``lp`` maps
    (M, d) points to log-densities. Proposals for a generation are built from
    the previous generation and evaluated in one batch.
    """
    if n_generations < 100:
        raise ValueError("n_generations must be at least 100")
    if n_chains < 4:
        raise ValueError("n_chains must be at least 4")
    bounds = np.asarray(region.bounds if hasattr(region, "bounds") else region, dtype=float)
    d = bounds.shape[0]
    lo, hi = bounds[:, 0], bounds[:, 1]
    widths = hi - lo
    rng = np.random.default_rng(derive_seed(rng_seed, 17))

    x = lo + widths * rng.random((n_chains, d))
    lx = lp(x)
    for _ in range(max_init_tries):
        bad = ~np.isfinite(lx)
        if not bad.any():
            break
        x[bad] = lo + widths * rng.random((int(bad.sum()), d))
        lx[bad] = lp(x[bad])
    if not np.all(np.isfinite(lx)):
        raise RuntimeError("could not initialise chains at finite density")

    trace = np.empty((n_generations, n_chains, d))
    tlog = np.empty((n_generations, n_chains))
    acc = np.zeros((n_generations, n_chains), bool)
    idx = np.arange(n_chains)
    for gen in range(n_generations):
        g = gamma_for(gen, gamma_scale, d)
        # r1, r2 distinct and different from i, drawn from the snapshot
        r1 = (idx + rng.integers(1, n_chains, n_chains)) % n_chains
        r2 = _third_index(idx, r1, rng, n_chains)
        e = JITTER_REL * widths * rng.standard_normal((n_chains, d))
        prop = x + g * (x[r1] - x[r2]) + e
        lprop = np.full(n_chains, -np.inf)
        inside = in_box(bounds, prop)
        if inside.any():
            lprop[inside] = lp(prop[inside])
        u = np.log(rng.random(n_chains))
        ok = np.isfinite(lprop) & (u <= lprop - lx)
        x = np.where(ok[:, None], prop, x)
        lx = np.where(ok, lprop, lx)
        trace[gen], tlog[gen], acc[gen] = x, lx, ok

    start = int(burn_in_fraction * n_generations)
    post = trace[start:]
    rate = float(acc[start:].mean()) if start < n_generations else float(acc.mean())
    # chain-major pooling so that thinning keeps every chain, evenly spaced in time
    pooled = post.transpose(1, 0, 2).reshape(-1, d)
    plog = tlog[start:].T.reshape(-1)
    if n_draws and len(pooled) > n_draws:
        take = np.linspace(0, len(pooled) - 1, n_draws).round().astype(int)
        pooled, plog = pooled[take], plog[take]
    return ChainResult(pooled, plog, rate, split_rhat(post.transpose(1, 0, 2)),
                       rate < LOW_ACCEPTANCE, trace if keep_trace else None,
                       tlog if keep_trace else None)


def _third_index(idx, r1, rng, n):
    """Uniform index different from both idx and r1 (per chain)."""
    r2 = rng.integers(0, n - 2, len(idx))
    a, b = np.minimum(idx, r1), np.maximum(idx, r1)
    r2 = r2 + (r2 >= a)
    r2 = r2 + (r2 >= b)
    return r2


def draws_to_mee(draws, attr: Attributable, epoch: float, B: float = 0.0) -> list:
    return [MeeState.from_array(x, srp_coeff=B, epoch=epoch) for x in points_to_mee(draws, attr)]


TRACE_FIELDS = ["generation", "chain", "logpost", "alpha", "delta", "alpha_rate", "delta_rate",
                "rho", "rho_rate", "accepted"]


def write_trace(path, result: ChainResult) -> None:
    if result.trace is None:
        raise ValueError("run_chains was called without keep_trace")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        d = result.trace.shape[-1]
        coords = TRACE_FIELDS[3:-1] if d == 6 else [f"x{i}" for i in range(d)]
        w.writerow(TRACE_FIELDS[:3] + coords + TRACE_FIELDS[-1:])
        prev = None
        for g, states in enumerate(result.trace):
            for c, s in enumerate(states):
                moved = prev is not None and not np.array_equal(s, prev[c])
                w.writerow([g, c, repr(float(result.trace_log[g, c]))] + [repr(float(v)) for v in s] + [int(moved)])
            prev = states
