"""YAML scenario configuration. Angles are degrees on disk and radians in memory.

Schema (every key optional; defaults are the desk scenario)::

    seed: 1
    epoch0_days: 800            # days past J2000
    duration_days: 60
    orbit: {lon_deg: -4.8, inc_deg: 2.0, raan_deg: 80.0, drift_deg_day: 0.03, B: 1.0}
    slot: {lon_center_deg: -4.8, lon_halfwidth_deg: 0.2,
           inc_center_deg: 2.0, inc_halfwidth_deg: 0.05}
    ewsk_drift_deg_day: 0.035
    truth_force:  {zonal_degree: 2, third_bodies: [sun, moon], srp: true,
                   eclipse: none, noise_sigma: 0.0, noise_step_s: 21600, area_to_mass: 0.02}
    filter_force: {... same keys ...}
    sensors:
      - {name: zimmerwald, lat_deg: 46.877, lon_deg: 7.465, alt_km: 0.951,
         elevation_mask_deg: 20, noise_arcsec: 1.0}
    b_jumps: {rate_days: 7, sigma: 0.1}
    tracks: {obs_probability: 0.5, length_min: [2, 10], n_points: 10, scan_step_s: 600}
    filter: {p_max_m_s: 10, p_min_m_s: 1, k_p: 3, gate_sigma: 3, prune_sigma: 5,
             phi: 0.95, tau_days: 1, n_h: 1000, kappa: null, kappa_h: 1,
             n_chains: 24, n_generations: 200, burn_in: 0.5, promote_after: 2,
             expire_after: 4, max_misses: 2}
    initial_sigma: [0.5, 1e-6, 1e-6, 1e-6, 1e-6, 1e-5]   # p km, f, g, h, k, L rad
    pcrb_mc: 100
"""
from __future__ import annotations

import math
from dataclasses import replace

import yaml

from .admissible_region import RegionThresholds
from .constants import DAY
from .forces import ForceModelConfig
from .observation import SensorSite
from .scenario import ScenarioConfig, TrackSettings
from .shf import FilterConfig

ARCSEC = math.radians(1.0 / 3600.0)


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


def _section(d, key, allowed):
    sec = d.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
    return sec


FORCE_KEYS = ("zonal_degree", "third_bodies", "srp", "eclipse", "noise_sigma", "noise_step_s",
              "area_to_mass")


def _force(sec, base: ForceModelConfig) -> ForceModelConfig:
    kw = {}
    if "zonal_degree" in sec:
        kw["zonal_degree"] = int(sec["zonal_degree"])
    if "third_bodies" in sec:
        kw["third_bodies"] = frozenset(str(b) for b in (sec["third_bodies"] or ()))
    if "srp" in sec:
        kw["srp_enabled"] = bool(sec["srp"])
    if "eclipse" in sec:
        kw["eclipse_model"] = str(sec["eclipse"])
    if "noise_sigma" in sec:
        kw["noise_sigma"] = float(sec["noise_sigma"])
    if "noise_step_s" in sec:
        kw["noise_step"] = float(sec["noise_step_s"])
    if "area_to_mass" in sec:
        kw["area_to_mass"] = float(sec["area_to_mass"])
    return replace(base, **kw)


def _sensor(d) -> SensorSite:
    if not isinstance(d, dict) or "name" not in d:
        raise ConfigError("each sensor needs at least a name")
    try:
        return SensorSite(str(d["name"]), math.radians(float(d["lat_deg"])),
                          math.radians(float(d["lon_deg"])), float(d.get("alt_km", 0.0)),
                          math.radians(float(d.get("elevation_mask_deg", 20.0))),
                          float(d.get("noise_arcsec", 1.0)) * ARCSEC)
    except KeyError as exc:
        raise ConfigError(f"sensor {d['name']!r} is missing {exc}") from exc


def config_from_dict(d: dict | None) -> ScenarioConfig:
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("configuration root must be a mapping")
    top = {"seed", "epoch0_days", "duration_days", "orbit", "slot", "ewsk_drift_deg_day",
           "truth_force", "filter_force", "sensors", "b_jumps", "tracks", "filter",
           "initial_sigma", "pcrb_mc"}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base = ScenarioConfig()
    try:
        kw = {}
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "epoch0_days" in d:
            kw["epoch0"] = float(d["epoch0_days"]) * DAY
        if "duration_days" in d:
            kw["duration_days"] = float(d["duration_days"])
        if "ewsk_drift_deg_day" in d:
            kw["ewsk_drift_deg_day"] = float(d["ewsk_drift_deg_day"])
        if "pcrb_mc" in d:
            kw["pcrb_mc"] = int(d["pcrb_mc"])
        if "initial_sigma" in d:
            s = tuple(float(v) for v in d["initial_sigma"])
            if len(s) != 6 or min(s) <= 0:
                raise ConfigError("initial_sigma needs six positive values")
            kw["initial_sigma"] = s

        orbit = _section(d, "orbit", ("lon_deg", "inc_deg", "raan_deg", "drift_deg_day", "B"))
        for key, attr in (("lon_deg", "lon0_deg"), ("inc_deg", "inc0_deg"),
                          ("raan_deg", "raan0_deg"), ("drift_deg_day", "drift0_deg_day"),
                          ("B", "B0")):
            if key in orbit:
                kw[attr] = float(orbit[key])
        slot = _section(d, "slot", ("lon_center_deg", "lon_halfwidth_deg", "inc_center_deg",
                                    "inc_halfwidth_deg"))
        for key in slot:
            kw[key] = float(slot[key])

        kw["truth_force"] = _force(_section(d, "truth_force", FORCE_KEYS), base.truth_force)
        kw["filter_force"] = _force(_section(d, "filter_force", FORCE_KEYS), base.filter_force)

        if "sensors" in d:
            if not isinstance(d["sensors"], list):
                raise ConfigError("'sensors' must be a list")
            kw["sensors"] = [_sensor(s) for s in d["sensors"]]

        bj = _section(d, "b_jumps", ("rate_days", "sigma"))
        if "rate_days" in bj:
            kw["b_jump_rate_days"] = float(bj["rate_days"])
        if "sigma" in bj:
            kw["b_jump_sigma"] = float(bj["sigma"])

        tk = _section(d, "tracks", ("obs_probability", "length_min", "n_points", "scan_step_s"))
        tkw = {}
        if "obs_probability" in tk:
            tkw["obs_probability"] = float(tk["obs_probability"])
        if "length_min" in tk:
            lo, hi = (float(v) for v in tk["length_min"])
            if not 0 < lo <= hi:
                raise ConfigError("tracks.length_min must be [lo, hi] with 0 < lo <= hi")
            tkw["length_min"] = (lo, hi)
        if "n_points" in tk:
            tkw["n_points"] = int(tk["n_points"])
        if "scan_step_s" in tk:
            tkw["scan_step"] = float(tk["scan_step_s"])
        kw["tracks"] = replace(TrackSettings(), **tkw)

        fkeys = ("p_max_m_s", "p_min_m_s", "k_p", "gate_sigma", "prune_sigma", "phi", "tau_days",
                 "n_h", "kappa", "kappa_h", "n_chains", "n_generations", "burn_in",
                 "promote_after", "expire_after", "max_misses")
        fs = _section(d, "filter", fkeys)
        th = RegionThresholds(float(fs.get("p_max_m_s", 10.0)) * 1e-3,
                              float(fs.get("p_min_m_s", 1.0)) * 1e-3, float(fs.get("k_p", 3.0)))
        fkw = {"thresholds": th}
        if "tau_days" in fs:
            fkw["tau"] = float(fs["tau_days"]) * DAY
        for key in ("gate_sigma", "prune_sigma", "phi", "kappa_h", "burn_in"):
            if key in fs:
                fkw[key] = float(fs[key])
        for key in ("n_h", "n_chains", "n_generations", "promote_after", "expire_after",
                    "max_misses"):
            if key in fs:
                fkw[key] = int(fs[key])
        if fs.get("kappa") is not None:
            fkw["kappa"] = float(fs["kappa"])
        kw["filter"] = FilterConfig(**fkw)
        return ScenarioConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return config_from_dict(data)
