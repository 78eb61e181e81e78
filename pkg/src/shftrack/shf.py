"""Stochastic hybrid filter: gating, hypothesis lifecycle and maneuver patterns of life."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .admissible_region import (CentroidError, RegionThresholds, build_region, points_to_mee,
                                x_opt)
from .filters import (DegenerateUpdateError, ParticlePopulation, derive_seed, gaussian_loglik,
                      predict, predicted_observables, regularized_resample, silverman_bandwidth,
                      systematic_indices,
                      tempered_update)
from .forces import ForceModelConfig
from .mcmc import ConfigurationError, LogPosterior, run_chains
from .observation import Attributable, residual
from .orbits import MeeState, aei, geo_mean_longitude, unwrap_to
from .propagation import PropagationError

DAY = 86400.0
COV_FLOOR = 1e-12


def sigma_quantile(n_sigma: float, dof: int = 4) -> float:
    """chi-square(dof) quantile at the probability mass of a two-sided n-sigma Gaussian interval."""
    return float(chi2.ppf(chi2.cdf(n_sigma**2, 1), dof))


@dataclass
class FilterConfig:
    thresholds: RegionThresholds = field(default_factory=RegionThresholds)
    gate_sigma: float = 3.0
    prune_sigma: float = 5.0
    phi: float = 0.95
    tau: float = DAY
    n_h: int = 1000
    kappa: float | None = None
    kappa_h: float = 1.0
    ess_min: float | None = None
    heuristics: bool = True
    n_chains: int = 24
    n_generations: int = 200
    burn_in: float = 0.5
    promote_after: int = 2
    expire_after: int = 4
    max_misses: int = 2
    retain: int = 6
    force: ForceModelConfig = field(default_factory=ForceModelConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.phi < 1:
            raise ValueError("phi must lie in (0, 1)")
        if self.n_h < 1:
            raise ValueError("n_h must be positive")

    @property
    def gate_threshold(self) -> float:
        return sigma_quantile(self.gate_sigma)

    @property
    def prune_threshold(self) -> float:
        return sigma_quantile(self.prune_sigma)


@dataclass(frozen=True)
class ManeuverRecord:
    xi_mean: np.ndarray  # (da km, de, di rad)
    xi_cov: np.ndarray
    lon_pre: float
    inc_pre: float
    epoch: float
    track_index: int
    floored: bool = False

    def __post_init__(self):
        np.linalg.cholesky(self.xi_cov)


@dataclass
class HeuristicKde:
    records: list = field(default_factory=list)

    def add(self, rec: ManeuverRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def eval(self, xi) -> np.ndarray:
        """Equal-weight Gaussian mixture density at ``xi`` (..., 3)."""
        if not self.records:
            raise ConfigurationError("heuristic KDE is empty")
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(-1, 3)
        logs = []
        for r in self.records:
            L = np.linalg.cholesky(r.xi_cov)
            u = np.linalg.solve(L, (flat - r.xi_mean).T).T
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            logs.append(-0.5 * np.sum(u * u, axis=1) - 0.5 * (3 * math.log(2 * math.pi) + logdet))
        out = np.exp(logsumexp(np.array(logs), axis=0) - math.log(len(self.records)))
        return out.reshape(xi.shape[:-1])


def kde_eval(kde: HeuristicKde, xi) -> float | np.ndarray:
    out = kde.eval(xi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ManeuverHypothesis:
    id: int
    kind: str  # ballistic | maneuver_control | maneuver_heuristic
    population: ParticlePopulation
    spawn_epoch: float
    spawn_track_index: int
    parent_id: int | None = None
    evidence: list = field(default_factory=list)  # (epoch, log p(z|x))
    pre_population: ParticlePopulation | None = None  # parent's pre-maneuver population
    last_population: ParticlePopulation | None = None  # population after last update
    lead_count: int = 0
    misses: int = 0

    def log_score(self, t: float, phi: float, tau: float = DAY) -> float:
        """log of sum_j phi^((t - t_j)/tau) p(z_j | x_j)."""
        if not self.evidence:
            return -math.inf
        ep, le = np.array(self.evidence).T
        return float(logsumexp(le + (t - ep) / tau * math.log(phi)))

    @property
    def is_maneuver(self) -> bool:
        return self.kind != "ballistic"


def gate(hyp: ManeuverHypothesis, attr: Attributable, threshold: float | None = None,
         with_spread: bool = True):
    """(d'^2, passed) at the weighted-mean state.

    The innovation covariance is R plus the population's spread in observable
    space (zero for a single particle). ``threshold`` defaults to the 3-sigma
    equivalent chi-square(4) quantile.
    """
    pop = hyp.population
    z_mean = predicted_observables(pop.weights @ pop.states, attr)[0]
    S = np.array(attr.covariance, dtype=float)
    if with_spread and pop.size > 1:
        zp = predicted_observables(pop.states, attr)
        d = residual(zp, z_mean)
        S = S + (pop.weights[:, None] * d).T @ d
    r = residual(attr.z, z_mean)
    d2 = float(r @ np.linalg.solve(S, r))
    return d2, d2 <= (sigma_quantile(3.0) if threshold is None else threshold)


def best_particle_d2(pop: ParticlePopulation, attr: Attributable, kernel: bool = True) -> float:
    """Smallest particle d^2 against the attributable.

    With ``kernel`` each particle is treated as its regularization kernel, so
    the covariance is R plus h^2 times the population's observable spread;
    for a single particle this is the plain measurement covariance.
    """
    zp = predicted_observables(pop.states, attr)
    r = residual(attr.z, zp)
    S = np.array(attr.covariance, dtype=float)
    if kernel and pop.size > 1:
        zm = pop.weights @ zp
        d = residual(zp, zm)
        S = S + silverman_bandwidth(pop.size, 6) ** 2 * (pop.weights[:, None] * d).T @ d
    Si = np.linalg.inv(S)
    return float(np.min(np.einsum("ij,jk,ik->i", r, Si, r)))


def characterize_maneuver(pre_pop: ParticlePopulation, post_pop: ParticlePopulation,
                          track_index: int = -1, rng_seed: int = 0) -> ManeuverRecord:
    """(da, de, di) between index-paired resampled pre/post particles."""
    n = min(pre_pop.size, post_pop.size)
    rng = np.random.default_rng(derive_seed(rng_seed, 31))
    a = pre_pop.states[systematic_indices(pre_pop.weights, rng)]
    b = post_pop.states[systematic_indices(post_pop.weights, rng)]
    xi = aei(b[:n]) - aei(a[:n])
    mean = xi.mean(axis=0)
    d = xi - mean
    cov = d.T @ d / max(n - 1, 1)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    floored = bool(np.any(vals < COV_FLOOR))
    cov = (vecs * np.maximum(vals, COV_FLOOR)) @ vecs.T
    pm = pre_pop.mean_state()
    return ManeuverRecord(mean, cov, geo_mean_longitude(pm), pm.inclination, post_pop.epoch,
                          track_index, floored)


@dataclass
class TrackReport:
    track_index: int
    epoch: float
    entries: list = field(default_factory=list)
    events: list = field(default_factory=list)
    maneuver_detected: bool = False
    uncorrelated: bool = False
    estimate: MeeState | None = None
    covariance: np.ndarray | None = None
    estimate_id: int | None = None


class ShfSession:
    """One tracked object: live hypotheses, maneuver history and event log."""

    def __init__(self, initial: ParticlePopulation, cfg: FilterConfig):
        self.cfg = cfg
        self.next_id = 1
        first = ManeuverHypothesis(0, "ballistic", initial, initial.epoch, -1)
        first.last_population = initial
        self.hypotheses = [first]
        self.kde = HeuristicKde()
        self.events: list = []
        self.records: list = []
        self.archive: list = []
        self.retired: ManeuverHypothesis | None = None
        self.track_count = 0
        self.spawn_log: list = []

    @classmethod
    def from_gaussian(cls, mean: MeeState, cov, cfg: FilterConfig, B_sigma: float = 0.0):
        rng = np.random.default_rng(derive_seed(cfg.seed, 3))
        x = rng.multivariate_normal(mean.as_array(), cov, cfg.n_h)
        B = np.clip(mean.srp_coeff + B_sigma * rng.standard_normal(cfg.n_h), 0.0, None)
        pop = ParticlePopulation.uniform(x, B, mean.epoch, derive_seed(cfg.seed, 0), "h0")
        return cls(pop, cfg)

    # -- helpers ---------------------------------------------------------------
    @property
    def ballistic(self) -> ManeuverHypothesis | None:
        for h in self.hypotheses:
            if h.kind == "ballistic":
                return h
        return None

    @property
    def in_reacquisition(self) -> bool:
        return not self.hypotheses

    def _event(self, kind, k, epoch, hyp, score=None, d2=None, **extra):
        ev = {"type": kind, "track_index": k, "epoch_s": epoch, "hypothesis_id": hyp.id,
              "parent_id": hyp.parent_id,
              "score": None if score is None or not math.isfinite(score) else score,
              "d2": d2}
        ev.update(extra)
        self.events.append(ev)
        return ev

    def scores(self, t: float) -> dict:
        return {h.id: h.log_score(t, self.cfg.phi, self.cfg.tau) for h in self.hypotheses}

    def leader(self, t: float):
        sc = self.scores(t)
        if not sc:
            return None
        best = max(sc.values())
        tied = [h for h in self.hypotheses
                if sc[h.id] == best or (math.isfinite(best) and abs(sc[h.id] - best) < 1e-12)]
        return min(tied, key=lambda h: h.id)

    # -- main flow ---------------------------------------------------------------
    def process_track(self, attr: Attributable) -> TrackReport:
        cfg = self.cfg
        k = self.track_count
        self.track_count += 1
        last = max((h.population.epoch for h in self.hypotheses), default=-math.inf)
        if attr.epoch < last:
            raise ValueError("tracks must be processed in epoch order")
        rep = TrackReport(k, attr.epoch)
        n_events = len(self.events)

        passed, prune = {}, set()
        for h in list(self.hypotheses):
            try:
                h.population = predict(h.population, attr.epoch - h.population.epoch, cfg.force)
            except PropagationError:
                prune.add(h.id)
                continue
            d2, ok = gate(h, attr, cfg.gate_threshold)
            best = best_particle_d2(h.population, attr)
            entry = {"id": h.id, "kind": h.kind, "d2": d2, "passed": ok, "best_d2": best,
                     "log_evidence": None}
            if ok:
                try:
                    pop, log_ev, _ = tempered_update(h.population, attr)
                except DegenerateUpdateError:
                    ok = entry["passed"] = False
                else:
                    h.population = regularized_resample(pop, cfg.ess_min)
                    h.evidence.append((attr.epoch, log_ev))
                    h.last_population = h.population
                    entry["log_evidence"] = log_ev
                    passed[h.id] = d2
            h.misses = 0 if ok else h.misses + 1
            if best > cfg.prune_threshold or h.misses >= cfg.max_misses:
                prune.add(h.id)
            rep.entries.append(entry)

        ball = self.ballistic
        need_spawn = (ball is None or ball.id not in passed) and not any(
            h.is_maneuver and h.id in passed for h in self.hypotheses)
        if need_spawn:
            parent = ball if ball is not None else self.retired
            spawned = self.spawn_hypotheses(parent, attr, k) if parent is not None else []
            if not spawned:
                rep.uncorrelated = True
                self.archive.append(attr)
                self._event("uncorrelated", k, attr.epoch,
                            parent or ManeuverHypothesis(-1, "ballistic", None, 0, -1),
                            d2=rep.entries[0]["d2"] if rep.entries else None)
            for h in spawned:
                self.hypotheses.append(h)
                rep.entries.append({"id": h.id, "kind": h.kind, "d2": 0.0, "passed": True,
                                    "best_d2": None, "log_evidence": h.evidence[0][1]})

        self._prune_and_promote(k, attr.epoch, prune, rep)
        rep.events = self.events[n_events:]
        for e in rep.entries:
            e["log_score"] = next((h.log_score(attr.epoch, cfg.phi, cfg.tau)
                                   for h in self.hypotheses if h.id == e["id"]), None)
        lead = self.leader(attr.epoch)
        if lead is not None:
            m, c = lead.population.mean_cov()
            rep.estimate = MeeState.from_array(m, srp_coeff=float(lead.population.weights @
                                                                   lead.population.B),
                                               epoch=attr.epoch)
            rep.covariance, rep.estimate_id = c, lead.id
        return rep

    def spawn_hypotheses(self, parent: ManeuverHypothesis, attr: Attributable, k: int) -> list:
        """Control-mode (and, with a nonempty KDE, heuristic-mode) hypotheses for ``attr``."""
        cfg = self.cfg
        pre_pop = parent.last_population or parent.population
        pre = pre_pop.mean_state()
        try:
            region = build_region(pre, attr, cfg.thresholds, cfg.force.without_noise())
            _, _, p_opt = x_opt(region.pre_orbit, attr, region.tof, region=region)
        except (CentroidError, PropagationError, np.linalg.LinAlgError, ValueError):
            return []
        self.spawn_log.append({"track_index": k, "p_centroid": region.p_centroid,
                               "p_adm": region.p_adm, "p_opt": p_opt})
        if p_opt > cfg.thresholds.p_max:
            return []
        modes = ["control"]
        if cfg.heuristics and len(self.kde):
            modes.append("heuristic")
        out = []
        for mode in modes:
            hid = self.next_id
            self.next_id += 1
            try:
                lp = LogPosterior(mode, attr, region, kappa=cfg.kappa, kappa_h=cfg.kappa_h,
                                  kde=self.kde if mode == "heuristic" else None)
                res = run_chains(lp, region, cfg.n_chains, cfg.n_generations, cfg.burn_in,
                                 derive_seed(cfg.seed, hid, k), n_draws=cfg.n_h)
            except (RuntimeError, ConfigurationError):
                continue
            x = points_to_mee(res.draws, attr)
            x[:, 5] = unwrap_to(x[:, 5], pre.L + (attr.epoch - pre.epoch) * pre.mean_motion)
            B = np.full(len(x), float(pre_pop.weights @ pre_pop.B))
            pop = ParticlePopulation.uniform(x, B, attr.epoch, derive_seed(cfg.seed, hid),
                                             f"h{hid}")
            ll = gaussian_loglik(attr.z, res.draws[:, :4], attr.covariance)
            h = ManeuverHypothesis(hid, f"maneuver_{mode}", pop, attr.epoch, k, parent.id,
                                   [(attr.epoch, float(logsumexp(ll) - math.log(len(ll))))],
                                   pre_population=pre_pop, last_population=pop)
            out.append(h)
            self._event("spawn", k, attr.epoch, h, score=h.evidence[0][1],
                        acceptance=res.acceptance)
        return out

    def _prune_and_promote(self, k: int, t: float, prune: set, rep: TrackReport) -> None:
        cfg = self.cfg
        for h in list(self.hypotheses):
            expired = h.is_maneuver and k - h.spawn_track_index >= cfg.expire_after
            if h.id in prune or expired:
                self.hypotheses.remove(h)
                if h.kind == "ballistic":
                    self.retired = h
                self._event("prune", k, t, h, score=h.log_score(t, cfg.phi, cfg.tau),
                            reason="expired" if expired and h.id not in prune else "gate")
        lead = self.leader(t)
        if lead is None:
            return
        for h in self.hypotheses:
            h.lead_count = h.lead_count + 1 if h is lead else 0
        if lead.is_maneuver and lead.lead_count >= cfg.promote_after:
            self.promote(lead, k, t, rep)

    def finalize(self) -> TrackReport | None:
        """End of data: a leading maneuver hypothesis can no longer be confirmed, so promote it."""
        if self.track_count == 0:
            return None
        t = max((h.population.epoch for h in self.hypotheses), default=None)
        lead = self.leader(t) if t is not None else None
        if lead is None or not lead.is_maneuver or lead.lead_count < 1:
            return None
        k = self.track_count - 1
        rep = TrackReport(k, t)
        n_events = len(self.events)
        self.promote(lead, k, t, rep, reason="end_of_data")
        rep.events = self.events[n_events:]
        return rep

    def promote(self, hyp: ManeuverHypothesis, k: int, t: float, rep: TrackReport,
                reason: str = "confirmed") -> None:
        cfg = self.cfg
        for h in list(self.hypotheses):
            if h is hyp:
                continue
            self.hypotheses.remove(h)
            if h.kind == "ballistic":
                self.retired = h
            self._event("prune", k, t, h, score=h.log_score(t, cfg.phi, cfg.tau), reason="retired")
        kind = hyp.kind
        hyp.kind = "ballistic"
        hyp.lead_count = 0
        rec = characterize_maneuver(hyp.pre_population, hyp.population, hyp.spawn_track_index,
                                    derive_seed(cfg.seed, hyp.id, 7))
        self.kde.add(rec)
        self.records.append(rec)
        rep.maneuver_detected = True
        self._event("promote", k, t, hyp, score=hyp.log_score(t, cfg.phi, cfg.tau),
                    detection_epoch_s=hyp.spawn_epoch,
                    first_track_index=hyp.spawn_track_index, mode=kind, reason=reason)


def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


RECORD_FIELDS = ["epoch_s", "da_km", "de", "di_rad", "c11", "c12", "c13", "c22", "c23", "c33",
                 "lon_pre_rad", "inc_pre_rad"]


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        iu = np.triu_indices(3)
        for r in records:
            w.writerow([repr(float(r.epoch))] + [repr(float(v)) for v in r.xi_mean]
                       + [repr(float(v)) for v in r.xi_cov[iu]]
                       + [repr(float(r.lon_pre)), repr(float(r.inc_pre))])
