"""Numerical propagation of MEE state arrays under the configured force model.

All particles of a population are integrated as one stacked ODE system so
numpy does the per-particle work. Process noise is a piecewise-constant RTN
acceleration per noise segment, drawn from a per-particle random stream
seeded by ``(seed, particle_index)``; results therefore do not depend on how
a population is split into batches.
"""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy.integrate import solve_ivp

from .forces import ForceModelConfig, perturbing_acceleration
from .orbits import (
    MeeState, OrbitError, check_altitude, keplerian_rate, mee_to_rv, rtn_basis,
    sensitivity_rows,
)

RTOL = 1e-10
ATOL = 1e-12


class PropagationError(RuntimeError):
    def __init__(self, message: str, last_epoch: float):
        super().__init__(f"{message} (last valid epoch {last_epoch:.3f} s)")
        self.last_epoch = last_epoch


def _rhs_factory(n: int, B, cfg: ForceModelConfig, noise_acc=None):
    B = np.asarray(B, dtype=float)

    def rhs(t, y):
        x = y.reshape(n, 6)
        A = sensitivity_rows(x)
        dx = np.zeros_like(x)
        if not cfg.two_body or noise_acc is not None:
            a_rtn = np.zeros((n, 3))
            if not cfg.two_body:
                pos, vel = mee_to_rv(x)
                acc = perturbing_acceleration(t, pos, B, cfg)
                a_rtn = np.einsum("nij,nj->ni", rtn_basis(pos, vel), acc)
            if noise_acc is not None:
                a_rtn = a_rtn + noise_acc
            dx = np.einsum("nij,nj->ni", A, a_rtn)
        dx[:, 5] += keplerian_rate(x)
        return dx.ravel()

    return rhs


def _integrate(x, B, t0, dt, cfg, noise_acc=None):
    n = x.shape[0]
    if dt == 0.0:
        return x.copy()
    rhs = _rhs_factory(n, B, cfg, noise_acc)
    sol = solve_ivp(rhs, (t0, t0 + dt), x.ravel(), method="DOP853", rtol=RTOL, atol=ATOL)
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise PropagationError(f"integration failed: {sol.message}", float(sol.t[-1]))
    return sol.y[:, -1].reshape(n, 6)


def noise_segments(t0: float, dt: float, step: float):
    """Split ``[t0, t0 + dt]`` into noise segments of length ``step`` (last one shorter)."""
    nseg = max(1, int(math.ceil(dt / step - 1e-12)))
    edges = np.minimum(np.arange(nseg + 1) * step, dt)
    edges[-1] = dt
    return [(t0 + edges[i], edges[i + 1] - edges[i]) for i in range(nseg)]


def draw_noise(seed: int, indices, nseg: int) -> np.ndarray:
    """Standard-normal RTN draws, shape ``(len(indices), nseg, 3)``; one stream per particle."""
    out = np.empty((len(indices), nseg, 3))
    for row, idx in enumerate(indices):
        out[row] = np.random.default_rng([int(seed), int(idx)]).standard_normal((nseg, 3))
    return out


def propagate_array(x, B, t0: float, dt: float, cfg: ForceModelConfig,
                    noise_seed: int | None = None, indices=None) -> np.ndarray:
    """Propagate ``(N, 6)`` MEE states from ``t0`` by ``dt`` seconds.

    ``indices`` label the particles for noise-stream selection (defaults to
    ``0..N-1``). Noise is only applied when ``noise_seed`` is given and the
    configuration carries a nonzero ``noise_sigma``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    B = np.broadcast_to(np.asarray(B, dtype=float), (n,))
    pos, _ = mee_to_rv(x)
    try:
        check_altitude(pos)
    except OrbitError as exc:
        raise PropagationError(str(exc), t0) from exc
    use_noise = noise_seed is not None and cfg.noise_sigma > 0.0 and dt != 0.0
    if not use_noise:
        return _integrate(x, B, t0, dt, cfg)
    if dt < 0:
        raise ValueError("process noise requires dt >= 0")
    if indices is None:
        indices = np.arange(n)
    segs = noise_segments(t0, dt, cfg.noise_step)
    z = draw_noise(noise_seed, indices, len(segs))
    for j, (ts, h) in enumerate(segs):
        acc = cfg.noise_sigma / math.sqrt(h) * z[:, j, :]
        x = _integrate(x, B, ts, h, cfg, noise_acc=acc)
    return x


def perturbed_propagate(state: MeeState, dt: float, cfg: ForceModelConfig,
                        noise_seed: int | None = None) -> MeeState:
    x = propagate_array(state.as_array()[None, :], state.srp_coeff, state.epoch, dt, cfg,
                        noise_seed=noise_seed)
    return MeeState.from_array(x[0], srp_coeff=state.srp_coeff, epoch=state.epoch + dt)


def trajectory(state: MeeState, times, cfg: ForceModelConfig) -> np.ndarray:
    """Noise-free MEE states of ``state`` at increasing ``times`` (absolute epochs), ``(T, 6)``."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.empty((0, 6))
    if np.any(np.diff(times) < 0) or times[0] < state.epoch:
        raise ValueError("times must be increasing and not before the state epoch")
    x = state.as_array()
    if times[-1] == state.epoch:
        return np.tile(x, (len(times), 1))
    check_altitude(mee_to_rv(x[None])[0])
    rhs = _rhs_factory(1, np.array([state.srp_coeff]), cfg)
    sol = solve_ivp(rhs, (state.epoch, times[-1]), x, method="DOP853", rtol=RTOL, atol=ATOL,
                    t_eval=times)
    if sol.status != 0 or not np.all(np.isfinite(sol.y)):
        raise PropagationError(f"integration failed: {sol.message}", float(sol.t[-1]))
    return sol.y.T.copy()
