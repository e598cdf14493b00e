"""Command-line driver: ``beeslab <command> --config <file> [--out DIR] [--jobs K]``.

Exit codes: 0 success, 2 config error, 3 invariant violation (coupling
order or PDE mass), 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .brw_bounds import (bbm_cumulant, hat_delta_cumulant, simulate_nbrw_lower,
                         simulate_nbrw_upper, speed_second_order, write_speed_sweep)
from .config import ConfigError, ExperimentConfig, parse_config
from .couplings import coupled_simulate_abs, coupled_simulate_monotone, write_coupled_run
from .drivers import make_driver_bundle
from .engine import ProcessKind, SimParams, simulate, write_trajectory_csv
from .fbp import (FBPError, PDEParams, STEADY_RADIUS, l1_distance, solve_fbp,
                  steady_state_density, uniform_initial, write_boundary_csv, write_snapshots_csv)
from .statistics import (classify_regime, common_slope, diffusivity_from_samples,
                         estimate_velocity, half_normal_cdf, ks_statistic,
                         occupation_fraction_negative, velocity_formula)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_RUNTIME = 0, 2, 3, 4


class InvariantViolation(RuntimeError):
    pass


class ReplicaError(RuntimeError):
    """A module error tagged with the seed that reproduces it."""


@dataclass
class RunManifest:
    config: Dict[str, Any]
    version: str
    seeds: List[int]
    wall_clock_seconds: float
    files: Dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    cells: List[Dict[str, Any]] = field(default_factory=list)
    messages: List[str] = field(default_factory=list)


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if hasattr(x, "value") and hasattr(x, "name"):
        return x.value
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _tagged(fn, tag, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ReplicaError, InvariantViolation):
        raise
    except Exception as exc:
        raise ReplicaError(f"seed={tag}: {type(exc).__name__}: {exc}") from exc


def _kind(name: str) -> ProcessKind:
    return ProcessKind(name)


# ---- per-replica workers (module level so they can be pickled) ----

def _sim_replica(args):
    seed, p, out = args
    n = p["n_particles"]
    init = np.zeros(n) if p["initial"] is None else np.array(p["initial"], dtype=float)
    sp = SimParams(n, p["mu"], p["horizon"], p["sub_step"], seed)
    tr = _tagged(simulate, seed, _kind(p["process"]), sp, init, make_driver_bundle(seed, n),
                 record_events=p["record_events"])
    path = os.path.join(out, f"trajectory_seed{seed}.csv")
    write_trajectory_csv(tr, path)
    est = estimate_velocity(tr, p["t_burn"])
    return {"seed": seed, "v_min_hat": est.v_min_hat, "v_max_hat": est.v_max_hat,
            "stderr": est.stderr, "n_events": tr.n_events}


def _couple_replica(args):
    seed, p, out = args
    n = p["n_particles"]
    nu = np.zeros(n) if p["nu"] is None else np.array(p["nu"], dtype=float)
    d = make_driver_bundle(seed, n)
    if p["mode"] == "monotone":
        other = nu if p["nu_other"] is None else np.array(p["nu_other"], dtype=float)
        run = _tagged(coupled_simulate_monotone, seed, nu, other, p["mu"], p["horizon"], d,
                      sub_step=p["sub_step"], seed=seed)
    else:
        other = -np.abs(nu) if p["nu_other"] is None else np.array(p["nu_other"], dtype=float)
        run = _tagged(coupled_simulate_abs, seed, nu, other, p["mu"], p["horizon"], d,
                      sub_step=p["sub_step"], seed=seed)
    write_coupled_run(run, os.path.join(out, f"seed{seed}"))
    return {"seed": seed, "violations": len(run.violations), "hit_time": run.hit_time}


def _nbbm_run(args):
    seed, n, mu, horizon, sub_step, process = args[:6]
    replica = args[6] if len(args) > 6 else 0
    sp = SimParams(n, mu, horizon, sub_step, seed)
    return _tagged(simulate, seed, _kind(process), sp, np.zeros(n),
                   make_driver_bundle(seed, n, replica=replica), record_events=False)


def _brw_replica(args):
    seed, n, delta, mu, horizon = args
    up = simulate_nbrw_upper(n, mu, int(math.ceil(horizon)), seed=seed)
    lo = simulate_nbrw_lower(n, delta, mu, int(math.ceil(horizon / delta)), seed=seed)
    return up, lo


# ---- command runners: each returns (files written, report dict) ----

def _estimate_mu_c(n, seeds, horizon, sub_step, t_burn, jobs):
    trajs = _pmap(_nbbm_run, [(s, n, 0.0, horizon, sub_step, "nbbm") for s in seeds], jobs)
    return estimate_velocity(trajs, t_burn)


def run_simulate(cfg: ExperimentConfig, out: str, jobs: int):
    rows = _pmap(_sim_replica, [(s, cfg.params, out) for s in cfg.seeds], jobs)
    files = [os.path.join(out, f"trajectory_seed{s}.csv") for s in cfg.seeds]
    path = os.path.join(out, "velocity.json")
    write_json(path, {"replicas": rows})
    return files + [path], {}


def run_couple(cfg, out, jobs):
    rows = _pmap(_couple_replica, [(s, cfg.params, out) for s in cfg.seeds], jobs)
    files = []
    for s in cfg.seeds:
        for name in ("bees", "bbm_low", "bbm_high", "violations"):
            f = os.path.join(out, f"seed{s}", f"{name}.csv")
            if os.path.exists(f):
                files.append(f)
    path = os.path.join(out, "couple.json")
    total = sum(r["violations"] for r in rows)
    write_json(path, {"replicas": rows, "total_violations": total})
    if total:
        raise InvariantViolation(f"{total} coupling-order violations", files + [path])
    return files + [path], {}


def run_velocity(cfg, out, jobs):
    p = cfg.params
    rows = []
    for n in p["n_values"]:
        trajs = _pmap(_nbbm_run, [(s, n, p["mu"], p["horizon"], p["sub_step"], p["process"])
                                  for s in cfg.seeds], jobs)
        e = estimate_velocity(trajs, p["t_burn"])
        rows.append({"N": n, "mu": p["mu"], "v_hat": e.v_hat, "stderr": e.stderr,
                     "v_min_hat": e.v_min_hat, "v_max_hat": e.v_max_hat,
                     "velocity_formula": velocity_formula(n) if n >= 2 else None})
    path_csv = os.path.join(out, "velocity.csv")
    _write_rows(path_csv, rows)
    path_json = os.path.join(out, "velocity.json")
    write_json(path_json, rows)
    return [path_csv, path_json], {}


def _write_rows(path, rows: List[dict]):
    keys = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else (format(r[k], ".17g") if isinstance(r[k], float)
                                                 else r[k]) for k in keys])


def _regime_cell(n, factor, mu_c, p, seeds, jobs):
    mu = factor * mu_c.v_hat
    trajs = _pmap(_nbbm_run, [(s, n, mu, p["horizon"], p["sub_step"], "bees") for s in seeds], jobs)
    slope, slope_se = common_slope(trajs, p["t_burn"])
    ends = np.array([tr.leftmost[-1] for tr in trajs])
    d_eff = (diffusivity_from_samples(ends, p["horizon"]).d_eff if len(seeds) >= 30 else None)
    diag = {"slope": slope, "slope_stderr": slope_se}
    rep = classify_regime(mu, mu_c.v_hat, mu_c.stderr, diag)
    return rep, d_eff


def run_regimes(cfg, out, jobs):
    p = cfg.params
    n = p["n_particles"]
    mu_c = _estimate_mu_c(n, cfg.seeds, p["mu_c_horizon"], p["sub_step"], None, jobs)
    reports, rows = [], []
    for f in p["mu_factors"]:
        rep, d_eff = _regime_cell(n, f, mu_c, p, cfg.seeds, jobs)
        reports.append({**asdict(rep), "mu_c_stderr": mu_c.stderr})
        rows.append({"N": n, "mu": rep.mu, "v_hat": rep.evidence["slope"],
                     "stderr": rep.evidence["slope_stderr"], "regime": rep.regime.value,
                     "d_eff": d_eff})
    pj = os.path.join(out, "regimes.json")
    write_json(pj, reports)
    pc = os.path.join(out, "regimes.csv")
    _write_rows(pc, rows)
    return [pj, pc], {}


def critical_report(n: int, m: float, seeds: Sequence[int], sub_step: float, mu_sign: int,
                    mu_c_horizon: float, t_burn: Optional[float], jobs: int = 1) -> dict:
    """Diagnostics of the critical regime at scale ``m``.

    The effective diffusivity comes from N-BBM replicas at drift
    ``-mu_c_hat``; the bees run at ``mu_sign * mu_c_hat``.
    """
    mu_c = _estimate_mu_c(n, seeds, mu_c_horizon, sub_step, t_burn, jobs)
    z = _pmap(_nbbm_run, [(s, n, -mu_c.v_hat, m, sub_step, "nbbm") for s in seeds], jobs)
    z1 = np.array([tr.leftmost[-1] for tr in z])
    diff = diffusivity_from_samples(z1, m)
    mu = mu_sign * mu_c.v_hat
    bees = _pmap(_nbbm_run, [(s, n, mu, m, sub_step, "bees", 1) for s in seeds], jobs)
    x1 = np.array([tr.leftmost[-1] for tr in bees])
    radius = np.array([tr.rightmost[-1] - tr.leftmost[-1] for tr in bees]) / math.sqrt(m)
    scaled = mu_sign * x1 / math.sqrt(m)
    stat, pval = ks_statistic(scaled, half_normal_cdf(math.sqrt(max(diff.d_eff, 1e-300))))
    side = "negative" if mu_sign > 0 else "positive"
    rank = 1 if mu_sign > 0 else n
    occ_early = [occupation_fraction_negative(tr, m / 10, rank, side) for tr in bees]
    occ_late = [occupation_fraction_negative(tr, m, rank, side) for tr in bees]
    return {
        "N": n, "m": m, "mu": mu, "mu_c_hat": mu_c.v_hat, "mu_c_stderr": mu_c.stderr,
        "d_eff": diff.d_eff, "d_eff_stderr": diff.d_eff_stderr,
        "ks_statistic": stat, "ks_p_value": pval, "ks_rejected_at_1pct": pval < 0.01,
        "mean_scaled_radius": float(radius.mean()),
        "occupation_early_mean": float(np.mean(occ_early)),
        "occupation_late_mean": float(np.mean(occ_late)),
        "occupation_decreased_fraction": float(np.mean(np.array(occ_late) < np.array(occ_early))),
        "scaled_samples": scaled,
    }


def run_critical(cfg, out, jobs):
    p = cfg.params
    rep = critical_report(p["n_particles"], p["m"], cfg.seeds, p["sub_step"], p["mu_sign"],
                          p["mu_c_horizon"], p["t_burn"], jobs)
    path = os.path.join(out, "critical.json")
    write_json(path, rep)
    return [path], {}


def run_brw(cfg, out, jobs):
    p = cfg.params
    rows = []
    for n in p["n_values"]:
        pairs = _pmap(_brw_replica, [(s, n, p["delta"], p["mu"], p["horizon"]) for s in cfg.seeds],
                      jobs)
        up = estimate_velocity([a for a, _ in pairs], p["t_burn"])
        lo = estimate_velocity([b for _, b in pairs], p["t_burn"])
        bb = estimate_velocity(_pmap(_nbbm_run, [(s, n, p["mu"], p["horizon"], p["sub_step"], "nbbm")
                                                 for s in cfg.seeds], jobs), p["t_burn"])
        rows.append(("upper", n, None, up.v_hat, up.stderr, speed_second_order(bbm_cumulant(), n)))
        lower_formula = (speed_second_order(hat_delta_cumulant(p["delta"]), n // 2)
                         if n // 2 >= 2 else None)
        rows.append(("lower", n, p["delta"], lo.v_hat, lo.stderr, lower_formula))
        rows.append(("nbbm", n, None, bb.v_hat, bb.stderr, velocity_formula(n)))
    path = os.path.join(out, "speed_sweep.csv")
    write_speed_sweep(rows, path)
    return [path], {}


def run_fbp(cfg, out, jobs):
    p = cfg.params
    pp = PDEParams(p["half_width"], p["h"], p["dt"], p["mu"], p["end_time"])
    lo, hi = p["initial_interval"]
    init = uniform_initial(pp, lo, hi)
    try:
        res = solve_fbp(init, pp, p["snapshot_every"], p["boundary_every"])
    except FBPError as exc:
        raise InvariantViolation(str(exc), []) from exc
    ps = os.path.join(out, "snapshots.csv")
    pb = os.path.join(out, "boundary.csv")
    write_snapshots_csv(res, ps)
    write_boundary_csv(res, pb)
    rep = {"final_time": res.final.time, "final_radius": res.final.radius,
           "max_mass_error": res.max_mass_error}
    if p["mu"] == 0:
        rep["l1_to_steady_state"] = l1_distance(res.final, steady_state_density)
        rep["steady_radius"] = STEADY_RADIUS
    pr = os.path.join(out, "fbp.json")
    write_json(pr, rep)
    return [ps, pb, pr], {}


def run_sweep(cfg, out, jobs):
    p = cfg.params
    rows, cells = [], []
    mu_cs: Dict[int, Any] = {}
    for cell in cfg.plan:
        n, f = cell["N"], cell["mu_factor"]
        entry = dict(cell)
        try:
            if n not in mu_cs:
                SimParams(n, 0.0, p["horizon"], p["sub_step"], 0)
                mu_cs[n] = _estimate_mu_c(n, cfg.seeds, p["mu_c_horizon"], p["sub_step"], None, jobs)
            rep, d_eff = _regime_cell(n, f, mu_cs[n], p, cfg.seeds, jobs)
            rows.append({"cell": cell["cell"], "N": n, "mu": rep.mu, "v_hat": rep.evidence["slope"],
                         "stderr": rep.evidence["slope_stderr"], "regime": rep.regime.value,
                         "d_eff": d_eff, "mu_c_hat": rep.mu_c_hat})
            entry["status"] = "ok"
        except Exception as exc:
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        cells.append(entry)
    path = os.path.join(out, "sweep.csv")
    _write_rows(path, rows)
    return [path], {"cells": cells}


RUNNERS = {
    "simulate": run_simulate, "couple": run_couple, "velocity": run_velocity,
    "regimes": run_regimes, "critical": run_critical, "brw": run_brw, "fbp": run_fbp,
    "sweep": run_sweep,
}


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None, jobs: int = 1) -> RunManifest:
    """Run one experiment and write ``manifest.json`` into the output directory.

    Invariant violations still produce a manifest (status ``violation``)
    before :class:`InvariantViolation` is re-raised.
    """
    out = out_dir or cfg.output_dir or "beeslab_out"
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    manifest = RunManifest(cfg.to_dict(), __version__, list(cfg.seeds), 0.0)
    err: Optional[InvariantViolation] = None
    try:
        files, extra = RUNNERS[cfg.command](cfg, out, jobs)
        manifest.cells = extra.get("cells", [])
        if any(c.get("status") == "failed" for c in manifest.cells):
            manifest.status = "partial"
    except InvariantViolation as exc:
        err = exc
        files = exc.args[1] if len(exc.args) > 1 else []
        manifest.status = "violation"
        manifest.messages.append(str(exc.args[0]))
    manifest.wall_clock_seconds = time.perf_counter() - t0
    manifest.files = {os.path.relpath(f, out): sha256_file(f) for f in sorted(files)}
    write_json(os.path.join(out, "manifest.json"), asdict(manifest))
    if err is not None:
        raise err
    return manifest


def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="beeslab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(RUNNERS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=None)
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args(argv)
    jobs = args.jobs
    if jobs is None:
        env = os.environ.get("BEESLAB_JOBS", "1")
        try:
            jobs = int(env)
        except ValueError:
            print(f"config error: BEESLAB_JOBS={env!r} is not an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        with open(args.config) as fh:
            cfg = parse_config(fh.read(), args.command)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        m = run_experiment(cfg, args.out, max(1, jobs))
    except InvariantViolation as exc:
        print(f"invariant violation: {exc.args[0]}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:
        traceback.print_exc()
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"status": m.status, "files": len(m.files),
                      "wall_clock_seconds": round(m.wall_clock_seconds, 3)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
