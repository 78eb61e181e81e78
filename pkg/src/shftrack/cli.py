"""Command line entry point: simulate, track, region, metrics, compare."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, ScenarioConfig, load_config

log = logging.getLogger("shftrack")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
METHODS = ("mhe", "mhe2", "shf", "shf2")


def _config(path) -> ScenarioConfig:
    return load_config(path) if path else ScenarioConfig()


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_simulate(args) -> int:
    from .orbits import mee_to_rv
    from .scenario import generate_tracks, mean_reobservation_days, simulate_truth

    cfg = _config(args.config)
    truth = simulate_truth(cfg)
    attrs = generate_tracks(truth)
    os.makedirs(args.out, exist_ok=True)
    pos, vel = mee_to_rv(truth.states)
    _write_csv(os.path.join(args.out, "truth.csv"),
               ["epoch_s", "p_km", "f", "g", "h", "k", "L_rad", "B",
                "x", "y", "z", "vx", "vy", "vz"],
               [[repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(b))]
                + [repr(float(v)) for v in np.concatenate([r, u])]
                for t, x, b, r, u in zip(truth.times, truth.states, truth.B, pos, vel)])
    _write_csv(os.path.join(args.out, "maneuvers.csv"),
               ["epoch_s", "kind", "dv_r_km_s", "dv_t_km_s", "dv_n_km_s"],
               [[repr(float(e.epoch)), e.kind] + [repr(float(v)) for v in e.dv]
                for e in truth.events])
    _write_csv(os.path.join(args.out, "b_jumps.csv"), ["epoch_s", "dB"],
               [[repr(t), repr(db)] for t, db in truth.b_jumps])
    _write_csv(os.path.join(args.out, "tracks.csv"),
               ["track_index", "epoch_s", "site", "alpha_rad", "delta_rad",
                "alpha_rate_rad_s", "delta_rate_rad_s"],
               [[k, repr(a.epoch), a.site.name] + [repr(float(v)) for v in a.z]
                for k, a in enumerate(attrs)])
    summary = {"n_tracks": len(attrs), "n_burns": len(truth.events),
               "n_maneuvers": len(truth.maneuvers()), "n_b_jumps": len(truth.b_jumps),
               "reobservation_days": mean_reobservation_days(attrs), "seed": cfg.seed}
    with open(os.path.join(args.out, "simulation.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_track(args) -> int:
    from .scenario import emit_reports, run_end_to_end

    cfg = _config(args.config)
    report = run_end_to_end(cfg, args.method.upper(), with_pcrb=not args.no_pcrb)
    emit_reports(report, args.out)
    print(json.dumps({"method": report.method, "detections": report.detections,
                      "runtime_s": round(report.runtime_s, 1)}, sort_keys=True))
    return EXIT_OK


def cmd_region(args) -> int:
    from .admissible_region import build_region, region_grid
    from .scenario import generate_tracks, simulate_truth

    cfg = _config(args.config)
    truth = simulate_truth(cfg)
    attrs = generate_tracks(truth)
    if not 0 <= args.track_index < len(attrs):
        raise ConfigError(f"track index {args.track_index} outside 0..{len(attrs) - 1}")
    attr = attrs[args.track_index]
    # the prior orbit is the truth at the previous track, as a converged filter would hold it
    t_pre = attrs[args.track_index - 1].epoch if args.track_index > 0 else cfg.epoch0
    pre = truth.state_at(t_pre)
    region = build_region(pre, attr, cfg.filter.thresholds, cfg.filter_force.without_noise())
    R, V, P = region_grid(region, args.grid)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "region.csv"), ["rho_km", "rho_rate_km_s", "P_km_s"],
               [[repr(float(r)), repr(float(v)), repr(float(p))]
                for r, v, p in zip(R.ravel(), V.ravel(), P.ravel())])
    meta = {"track_index": args.track_index, "p_adm_km_s": region.p_adm,
            "bounds": region.bounds.tolist(), "grid": args.grid}
    with open(os.path.join(args.out, "region.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    print(json.dumps({"p_adm_km_s": region.p_adm, "grid": args.grid}))
    return EXIT_OK


def _read_run(run_dir):
    with open(os.path.join(run_dir, "summary.json")) as fh:
        summary = json.load(fh)
    rmse = {}
    path = os.path.join(run_dir, "rmse_by_tracks.csv")
    if os.path.exists(path):
        with open(path) as fh:
            for row in csv.DictReader(fh):
                rmse[int(row["n_tracks"])] = float(row["pos_rmse_km"])
    return summary, rmse


def _trend(rmse, upto=5) -> float:
    from scipy.stats import spearmanr
    ks = [k for k in sorted(rmse) if 1 <= k <= upto]
    if len(ks) < 3:
        return None
    return float(spearmanr(ks, [rmse[k] for k in ks])[0])


def cmd_metrics(args) -> int:
    summary, rmse = _read_run(args.run_dir)
    out = {"method": summary["method"], "detections": summary["detections"],
           "missed": summary.get("missed", 0),
           "rmse_km": {str(k): v for k, v in sorted(rmse.items())},
           "spearman_rho_1_5": _trend(rmse)}
    d2_path = os.path.join(args.run_dir, "d2_samples.csv")
    if os.path.exists(d2_path):
        from .metrics import chi2_consistency
        by_src = {}
        with open(d2_path) as fh:
            for row in csv.DictReader(fh):
                by_src.setdefault(row["source"], []).append(float(row["d2"]))
        for src, vals in by_src.items():
            if len(vals) >= 30:
                c = chi2_consistency(vals, 6)
                out[f"chi2_{src}"] = {"ks": c.ks_statistic, "p": c.p_value,
                                      "skewness_excess": c.skewness_excess}
    with open(os.path.join(args.run_dir, "metrics.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    runs = [(d, *_read_run(d)) for d in args.run_dirs]
    ks = sorted({k for _, _, r in runs for k in r if k <= args.max_tracks})
    header = ["run", "method", "correct", "delayed", "missed", "false", "runtime_s"]
    header += [f"rmse_nT{k}_km" for k in ks]
    lines = []
    for d, s, r in runs:
        det = s["detections"]
        lines.append([os.path.basename(os.path.normpath(d)), s["method"], det["correct"],
                      det["delayed"], s.get("missed", 0), det["false"],
                      f"{s['runtime_s']:.1f}"] + [f"{r[k]:.3f}" if k in r else "" for k in ks])
    if args.out:
        _write_csv(args.out, header, lines)
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    for row in [header] + lines:
        print("  ".join(str(x).ljust(w) for x, w in zip(row, widths)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shftrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="truth trajectory, maneuvers and tracks")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("track", help="run an estimator end to end and write reports")
    s.add_argument("--config")
    s.add_argument("--method", choices=METHODS, type=str.lower, default="shf2")
    s.add_argument("--out", required=True)
    s.add_argument("--no-pcrb", action="store_true", help="skip the PCRB timeline")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("region", help="control distance over the admissible range box")
    s.add_argument("--config")
    s.add_argument("--track-index", type=int, required=True)
    s.add_argument("--grid", type=int, default=101)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_region)

    s = sub.add_parser("metrics", help="summarize one run directory")
    s.add_argument("--run-dir", required=True)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("compare", help="joint detection and RMSE table")
    s.add_argument("--run-dirs", nargs="+", required=True)
    s.add_argument("--max-tracks", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "grid", 2) < 2:
            raise ConfigError("--grid must be at least 2")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
