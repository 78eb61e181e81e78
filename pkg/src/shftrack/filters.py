"""Particle populations: bootstrap prediction and update, ESS, regularized resampling.

The array kernels (``bayes_update``, ``systematic_indices``, ``kernel_jitter``)
are model-agnostic so they can be checked on linear-Gaussian systems; the
population-level functions wrap them with orbit propagation and the optical
measurement model.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .forces import ForceModelConfig
from .observation import Attributable, observe, residual
from .orbits import MeeState, mee_to_rv
from .propagation import PropagationError, propagate_array

BLOCK = 250  # fixed propagation block size; independent of the worker count
JITTER_FLOOR = 1e-14


class DegenerateUpdateError(RuntimeError):
    """Every particle has zero likelihood in double precision."""


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SHF_THREADS", "1")))
    except ValueError:
        return 1


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
               .generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# array kernels


def normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if not s > 0:
        raise DegenerateUpdateError("weights sum to zero")
    return w / s


def bayes_update(weights, loglik):
    """Posterior weights and log-evidence log(sum w_i p(z|x_i)) computed in log space."""
    w = np.asarray(weights, dtype=float)
    ll = np.asarray(loglik, dtype=float)
    with np.errstate(divide="ignore"):
        lw = np.log(w) + ll
    if not np.any(np.isfinite(lw)):
        raise DegenerateUpdateError("all particle likelihoods vanish")
    log_ev = float(logsumexp(lw))
    post = np.exp(lw - log_ev)
    return post / post.sum(), log_ev


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights, rng) -> np.ndarray:
    """Systematic resampling: one uniform offset, N evenly spaced pointers."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    c = np.cumsum(w)
    c[-1] = 1.0
    u = (rng.random() + np.arange(n)) / n
    return np.searchsorted(c, u, side="right").clip(0, n - 1)


def silverman_bandwidth(n_particles: int, dim: int) -> float:
    return (4.0 / (n_particles * (dim + 2))) ** (1.0 / (dim + 4))


def weighted_mean_cov(x, weights):
    w = np.asarray(weights, dtype=float)
    mean = w @ x
    d = x - mean
    cov = (w[:, None] * d).T @ d
    return mean, 0.5 * (cov + cov.T)


def cov_sqrt(cov, floor: float = JITTER_FLOOR) -> np.ndarray:
    """Symmetric square root restricted to eigen-directions above ``floor``."""
    vals, vecs = np.linalg.eigh(cov)
    vals = np.where(vals > floor, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def kernel_jitter(x, weights, rng, h: float | None = None):
    """Resampled-and-jittered copy of ``x`` (regularized resampling core).

    Returns (new_x, parent_indices). The kernel covariance is h^2 times the
    weighted sample covariance of ``x``.
    """
    x = np.asarray(x, dtype=float)
    n, dim = x.shape
    h = silverman_bandwidth(n, dim) if h is None else h
    _, cov = weighted_mean_cov(x, weights)
    S = cov_sqrt(cov)
    idx = systematic_indices(weights, rng)
    eps = rng.standard_normal((n, dim))
    return x[idx] + h * eps @ S.T, idx


# ---------------------------------------------------------------------------
# populations


@dataclass(frozen=True)
class ParticlePopulation:
    """Weighted MEE particles (unwrapped L) with SRP coefficients.

    ``ids`` label each particle's noise stream; ``step`` counts predictions
    and resamplings so that every random draw derives from
    ``(rng_seed, step, id)``.
    """
    states: np.ndarray
    B: np.ndarray
    weights: np.ndarray
    epoch: float
    rng_seed: int = 0
    hypothesis_tag: str = ""
    ids: np.ndarray | None = None
    step: int = 0
    failed: int = 0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.states, dtype=float))
        n = x.shape[0]
        if x.shape[1] != 6 or n < 1:
            raise ValueError("states must be (N, 6) with N >= 1")
        B = np.broadcast_to(np.asarray(self.B, dtype=float), (n,)).copy()
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0):
            raise ValueError("weights must be N nonnegative values")
        ids = np.arange(n) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "weights", normalize(w))
        object.__setattr__(self, "ids", ids)

    @classmethod
    def uniform(cls, states, B, epoch, rng_seed=0, tag="") -> "ParticlePopulation":
        states = np.atleast_2d(states)
        return cls(states, B, np.full(len(states), 1.0 / len(states)), epoch, rng_seed, tag)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def particles(self) -> list:
        return [MeeState.from_array(x, srp_coeff=b, epoch=self.epoch)
                for x, b in zip(self.states, self.B)]

    def mean_state(self) -> MeeState:
        m = self.weights @ self.states
        return MeeState.from_array(m, srp_coeff=float(self.weights @ self.B), epoch=self.epoch)

    def mean_cov(self, with_B: bool = False):
        x = np.column_stack([self.states, self.B]) if with_B else self.states
        return weighted_mean_cov(x, self.weights)

    def cartesian(self):
        return mee_to_rv(self.states)


def _propagate_block(x, B, t0, dt, cfg, seed, ids):
    try:
        return propagate_array(x, B, t0, dt, cfg, noise_seed=seed, indices=ids), np.ones(len(x), bool)
    except PropagationError:
        out = np.empty_like(x)
        ok = np.ones(len(x), bool)
        for i in range(len(x)):
            try:
                out[i] = propagate_array(x[i:i + 1], B[i:i + 1], t0, dt, cfg, noise_seed=seed,
                                         indices=ids[i:i + 1])[0]
            except PropagationError:
                out[i] = x[i]
                ok[i] = False
        return out, ok


def predict(pop: ParticlePopulation, dt: float, cfg: ForceModelConfig,
            workers: int | None = None) -> ParticlePopulation:
    """Propagate every particle by ``dt`` with its own process-noise stream."""
    if dt < 0:
        raise ValueError("prediction needs dt >= 0")
    if dt == 0:
        return pop
    seed = derive_seed(pop.rng_seed, pop.step, 1)
    blocks = [slice(s, min(s + BLOCK, pop.size)) for s in range(0, pop.size, BLOCK)]
    job = lambda sl: _propagate_block(pop.states[sl], pop.B[sl], pop.epoch, dt, cfg, seed,
                                      pop.ids[sl])
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(job, blocks))
    else:
        results = [job(sl) for sl in blocks]
    states = np.concatenate([r[0] for r in results])
    ok = np.concatenate([r[1] for r in results])
    w = np.where(ok, pop.weights, 0.0)
    if not w.sum() > 0:
        raise PropagationError("every particle failed to propagate", pop.epoch)
    return replace(pop, states=states, weights=w, epoch=pop.epoch + dt, step=pop.step + 1,
                   failed=pop.failed + int((~ok).sum()))


def predicted_observables(states, attr: Attributable) -> np.ndarray:
    pos, vel = mee_to_rv(np.atleast_2d(states))
    rs, vs = attr.site.inertial(attr.epoch)
    return observe(pos, vel, rs, vs)


def gaussian_loglik(z_obs, z_pred, R) -> np.ndarray:
    """log N(z_obs; z_pred, R) per row of ``z_pred`` (RA residual wrapped)."""
    r = residual(z_obs, z_pred)
    L = np.linalg.cholesky(R)
    u = np.linalg.solve(L, np.atleast_2d(r).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * np.sum(u * u, axis=-1) - 0.5 * (len(R) * math.log(2 * math.pi) + logdet)


def particle_loglik(pop: ParticlePopulation, attr: Attributable) -> np.ndarray:
    if attr.covariance is None:
        raise ValueError("attributable covariance required")
    return gaussian_loglik(attr.z, predicted_observables(pop.states, attr), attr.covariance)


def update_weights(pop: ParticlePopulation, attr: Attributable, loglik=None):
    """Bayes update with the attributable; returns (population, log-evidence)."""
    if abs(attr.epoch - pop.epoch) > 1e-6:
        raise ValueError("population and attributable epochs differ")
    ll = particle_loglik(pop, attr) if loglik is None else loglik
    w, log_ev = bayes_update(pop.weights, ll)
    return replace(pop, weights=w), log_ev


def regularized_resample(pop: ParticlePopulation, ess_min: float | None = None,
                         force: bool = False) -> ParticlePopulation:
    """Systematic resampling plus Gaussian kernel jitter (Silverman bandwidth, MEE space)."""
    n = pop.size
    ess_min = n / 2 if ess_min is None else ess_min
    if not force and ess(pop.weights) > ess_min:
        return pop
    rng = np.random.default_rng(derive_seed(pop.rng_seed, pop.step, 2))
    x, idx = kernel_jitter(pop.states, pop.weights, rng)
    _, varB = weighted_mean_cov(pop.B[:, None], pop.weights)
    hB = silverman_bandwidth(n, 1)
    B = pop.B[idx] + hB * math.sqrt(max(float(varB[0, 0]), 0.0)) * rng.standard_normal(n)
    B = np.clip(B, 0.0, None)
    return replace(pop, states=x, B=B, weights=np.full(n, 1.0 / n), step=pop.step + 1)


def tempered_update(pop: ParticlePopulation, attr: Attributable, target_ess: float = 0.5,
                    max_stages: int = 30):
    """Progressive-correction update for diffuse populations.

    The likelihood is applied in powers that sum to one; each stage's power
    is the largest keeping ESS at ``target_ess * N``, and the population is
    resampled with kernel jitter between stages. The returned log-evidence
    is that of the full (untempered) likelihood under the prior weights.
    """
    ll_full = particle_loglik(pop, attr)
    _, log_ev = bayes_update(pop.weights, ll_full)
    done = 0.0
    stages = 0
    while done < 1.0:
        ll = particle_loglik(pop, attr) if stages else ll_full
        rest = 1.0 - done
        w_full, _ = bayes_update(pop.weights, rest * ll)
        if ess(w_full) >= target_ess * pop.size or stages >= max_stages - 1:
            gamma = rest
        else:
            lo, hi = 0.0, rest
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if ess(bayes_update(pop.weights, mid * ll)[0]) >= target_ess * pop.size:
                    lo = mid
                else:
                    hi = mid
            gamma = max(lo, 1e-6)
        w, _ = bayes_update(pop.weights, gamma * ll)
        pop = replace(pop, weights=w)
        done += gamma
        stages += 1
        if done < 1.0 - 1e-12:
            pop = regularized_resample(pop, force=True)
        else:
            done = 1.0
    return pop, log_ev, stages


# ---------------------------------------------------------------------------
# snapshots

SNAPSHOT_FIELDS = ["particle_id", "weight", "p", "f", "g", "h", "k", "L", "B"]


def write_snapshot(path, pop: ParticlePopulation) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_FIELDS)
        for i, wt, x, b in zip(pop.ids, pop.weights, pop.states, pop.B):
            w.writerow([int(i), repr(float(wt))] + [repr(float(v)) for v in x] + [repr(float(b))])
