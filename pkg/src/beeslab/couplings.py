"""Shared-randomness couplings of bees and N-BBM, with runtime order checks.

``coupled_simulate_monotone`` drives a bees process from ``nu`` and two
N-BBMs from ``nu <= nu_prime`` with the same clock, indices and rank
drivers; the order ``bees <= bbm(nu) <= bbm(nu_prime)`` then holds
surely and is checked at every event and grid sample.

``coupled_simulate_abs`` (drift <= 0) drives the bees with sign-flipped
drivers so that an N-BBM from ``nu_tilde <= -|nu|`` stays to the left of
``-|bees|`` until a bee first touches the origin.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .drivers import DriverBundle, make_driver_bundle
from .engine import (
    Configuration, ProcessKind, SimParams, Trajectory, _k, _killed_side, _l, _Recorder,
    bridge_crossing_probabilities, compare_left_of, grid_slice, piece_increments, rank_sort,
    write_trajectory_csv,
)

__all__ = ["DriverBundle", "make_driver_bundle", "CoupledRun", "coupled_simulate_monotone",
           "coupled_simulate_abs", "sign_vector", "write_coupled_run"]


@dataclass
class CoupledRun:
    bees: Trajectory
    bbm_low: Trajectory
    bbm_high: Optional[Trajectory] = None
    violations: List[Tuple[float, str]] = field(default_factory=list)
    hit_time: Optional[float] = None
    sign_matrix: Optional[np.ndarray] = None


def _config(v) -> Configuration:
    return v if isinstance(v, Configuration) else rank_sort(v)


def sign_vector(v: np.ndarray) -> np.ndarray:
    """Sign in {-1, +1}; zero counts as +1."""
    return np.where(v >= 0, 1.0, -1.0)


def _row_violations(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Rows where sorted ``left`` is not componentwise <= sorted ``right``."""
    return ~np.all(left <= right, axis=1)


def coupled_simulate_monotone(nu, nu_prime, mu: float, horizon: float,
                              drivers: Optional[DriverBundle] = None, *,
                              sub_step: float = 0.01, seed: int = 0,
                              record_events: bool = True) -> CoupledRun:
    a, b_ = _config(nu), _config(nu_prime)
    n = len(a)
    if len(b_) != n:
        raise ValueError("nu and nu_prime must have the same size")
    if not compare_left_of(a, b_):
        raise ValueError("initial configurations are not ordered: nu must lie left of nu_prime")
    params = SimParams(n, mu, horizon, sub_step, seed)
    if drivers is None:
        drivers = make_driver_bundle(seed, n)

    ops = (_k, _l, _l)
    kinds = (ProcessKind.BEES, ProcessKind.NBBM, ProcessKind.NBBM)
    recs = [_Recorder(n, record_events, True) for _ in range(3)]
    pos = [a.positions.copy(), a.positions.copy(), b_.positions.copy()]
    names = ("bees<=bbm_low", "bbm_low<=bbm_high")
    violations: List[Tuple[float, str]] = []

    def check(times, rows):
        for pair, (x, y) in enumerate(((rows[0], rows[1]), (rows[1], rows[2]))):
            for j in np.flatnonzero(_row_violations(x, y)):
                violations.append((float(times[j]), names[pair]))

    check(np.zeros(1), [p[None, :] for p in pos])
    t, k = 0.0, 0
    while True:
        tb = t + drivers.next_gap()
        last = tb >= horizon
        end = horizon if last else tb
        k_stop = grid_slice(k, end, sub_step, inclusive=last)
        if k_stop == k:
            dt = end - t
            inc = math.sqrt(dt) * drivers.gaussians(1)[0] + mu * dt
            pos = [p + inc for p in pos]
        else:
            draws = drivers.gaussians(k_stop - k + 1)
            gtimes, db, dts = piece_increments(t, end, k, k_stop, sub_step, draws)
            cum = np.cumsum(db + mu * dts[:, None], axis=0)
            paths = [p + cum for p in pos]
            rows = [np.sort(pth[:-1], axis=1) for pth in paths]
            for r, rw in zip(recs, rows):
                r.grid(gtimes, rw)
            check(gtimes, rows)
            pos = [pth[-1] for pth in paths]
            k = k_stop
        if last:
            pos = [np.sort(p) for p in pos]
            break
        i = drivers.next_index()
        pres = [np.sort(p) for p in pos]
        posts = [op(pre, i - 1) for op, pre in zip(ops, pres)]
        for r, kind, pre, post in zip(recs, kinds, pres, posts):
            r.event(tb, i, _killed_side(kind, pre), pre, post)
        check(np.array([tb]), [p[None, :] for p in posts])
        pos = posts
        t = tb
    inits = (a, a, b_)
    trajs = [r.build(kind, params, init, p, horizon, None)
             for r, kind, init, p in zip(recs, kinds, inits, pos)]
    return CoupledRun(trajs[0], trajs[1], trajs[2], violations)


def coupled_simulate_abs(nu, nu_tilde, mu: float, horizon: float,
                         drivers: Optional[DriverBundle] = None, *,
                         sub_step: float = 0.01, seed: int = 0,
                         record_events: bool = True) -> CoupledRun:
    """Bees from ``nu`` against an N-BBM from ``nu_tilde``, for ``mu <= 0``.

    During each inter-event interval the driver of rank ``j`` moves the
    j-th smallest N-BBM particle and the bee with the j-th smallest value
    of ``-|x|``, the latter with its Brownian part multiplied by
    ``-sign(x)`` taken at the interval start. At a branching with uniform
    rank ``I`` the N-BBM applies ``l`` at ``I`` and the bees apply ``k`` at
    the bee whose ``-|x|`` is I-th smallest. Then ``bbm <= -|bees|`` until
    the first time a bee touches 0, which is returned as ``hit_time``
    (end of the first piece containing a touch, detected by sign change or
    a Brownian-bridge draw). The order is asserted only before that time.
    """
    if mu > 0:
        raise ValueError("abs coupling requires mu <= 0; reflect space first")
    bees0, bbm0 = _config(nu), _config(nu_tilde)
    n = len(bees0)
    if len(bbm0) != n:
        raise ValueError("nu and nu_tilde must have the same size")
    if not compare_left_of(bbm0, -np.abs(bees0.positions)):
        raise ValueError("precondition violated: nu_tilde must lie left of -|nu|")
    params = SimParams(n, mu, horizon, sub_step, seed)
    if drivers is None:
        drivers = make_driver_bundle(seed, n)

    rec_bees = _Recorder(n, record_events, True)
    rec_bbm = _Recorder(n, record_events, True)
    bees = bees0.positions.copy()
    xi = bbm0.positions.copy()
    violations: List[Tuple[float, str]] = []
    signs: List[np.ndarray] = []
    hit: Optional[float] = 0.0 if np.any(bees == 0.0) else None

    def check(times, bbm_rows, bee_rows):
        for j in np.flatnonzero(_row_violations(bbm_rows, np.sort(-np.abs(bee_rows), axis=1))):
            if hit is None or times[j] < hit:
                violations.append((float(times[j]), "bbm<=-|bees|"))

    t, k = 0.0, 0
    while True:
        order = np.argsort(-np.abs(bees), kind="stable")
        y = bees[order]
        s = sign_vector(y)
        signs.append(s)
        tb = t + drivers.next_gap()
        last = tb >= horizon
        end = horizon if last else tb
        k_stop = grid_slice(k, end, sub_step, inclusive=last)
        if k_stop == k:
            dt = end - t
            db = math.sqrt(dt) * drivers.gaussians(1)[0]
            xi_path = (xi + (db + mu * dt))[None, :]
            y_path = (y + ((-s) * db + mu * dt))[None, :]
            gtimes = np.empty(0)
            dts = np.array([dt])
        else:
            draws = drivers.gaussians(k_stop - k + 1)
            gtimes, db, dts = piece_increments(t, end, k, k_stop, sub_step, draws)
            xi_path = xi + np.cumsum(db + mu * dts[:, None], axis=0)
            y_path = y + np.cumsum((-s) * db + mu * dts[:, None], axis=0)
        if hit is None:
            starts = np.vstack([y[None, :], y_path[:-1]])
            piece_t = np.concatenate((gtimes, [end]))
            with np.errstate(divide="ignore"):
                p = bridge_crossing_probabilities(starts, y_path, np.maximum(dts, 0.0)[:, None])
            p = np.where(dts[:, None] > 0, p, (starts * y_path <= 0).astype(float))
            u = drivers.uniforms(p.shape[0])
            touched = np.flatnonzero(np.any(u < p, axis=1))
            if touched.size:
                hit = float(piece_t[touched[0]])
        if gtimes.size:
            xi_rows = np.sort(xi_path[:-1], axis=1)
            bee_rows = np.sort(y_path[:-1], axis=1)
            rec_bbm.grid(gtimes, xi_rows)
            rec_bees.grid(gtimes, bee_rows)
            check(gtimes, xi_rows, bee_rows)
            k = k_stop
        xi, y = xi_path[-1], y_path[-1]
        if last:
            xi, bees = np.sort(xi), np.sort(y)
            break
        i = drivers.next_index()
        pre_xi, pre_bees = np.sort(xi), np.sort(y)
        i_tilde = int(np.argsort(-np.abs(pre_bees), kind="stable")[i - 1])
        post_xi = _l(pre_xi, i - 1)
        post_bees = _k(pre_bees, i_tilde)
        rec_bbm.event(tb, i, _killed_side(ProcessKind.NBBM, pre_xi), pre_xi, post_xi)
        rec_bees.event(tb, i_tilde + 1, _killed_side(ProcessKind.BEES, pre_bees), pre_bees, post_bees)
        check(np.array([tb]), post_xi[None, :], post_bees[None, :])
        xi, bees = post_xi, post_bees
        t = tb
    tr_bees = rec_bees.build(ProcessKind.BEES, params, bees0, bees, horizon, None)
    tr_bbm = rec_bbm.build(ProcessKind.NBBM, params, bbm0, xi, horizon, None)
    return CoupledRun(tr_bees, tr_bbm, None, violations, hit, np.array(signs))


def write_coupled_run(run: CoupledRun, out_dir) -> List[str]:
    """Per-trajectory CSVs plus ``violations.csv`` (header ``time,pair``)."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in ("bees", "bbm_low", "bbm_high"):
        traj = getattr(run, name)
        if traj is not None:
            path = os.path.join(out_dir, f"{name}.csv")
            write_trajectory_csv(traj, path)
            written.append(path)
    path = os.path.join(out_dir, "violations.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "pair"])
        for t, pair in run.violations:
            w.writerow([format(t, ".17g"), pair])
    written.append(path)
    return written
