"""Estimators and tests for the drift regimes of Brownian bees.

Everything here is a pure function of recorded trajectories. Objects
passed as "trajectories" only need ``sample_times``, ``leftmost`` and
``rightmost`` (engine trajectories and the BRW records both qualify),
except where grid configurations are required.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .drivers import DriverBundle, make_driver_bundle
from .engine import Configuration, ProcessKind, SimParams, Trajectory, rank_sort, simulate

SQRT2 = math.sqrt(2.0)


def velocity_formula(n: int) -> float:
    """Two-term expansion sqrt(2) - pi^2 / (sqrt(2) (log N)^2) of the N-BBM speed."""
    if n < 2:
        raise ValueError("velocity_formula needs N >= 2")
    return SQRT2 - math.pi ** 2 / (SQRT2 * math.log(n) ** 2)


@dataclass
class VelocityEstimate:
    v_min_hat: float
    v_max_hat: float
    stderr: float
    window: Tuple[float, float]
    stderr_min: float = 0.0
    stderr_max: float = 0.0
    n_replicas: int = 1

    @property
    def v_hat(self) -> float:
        return 0.5 * (self.v_min_hat + self.v_max_hat)


def _ols_slope(t: np.ndarray, y: np.ndarray) -> float:
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def _window(tr, t_burn, t_end):
    t = np.asarray(tr.sample_times)
    hi = t[-1] if t_end is None else t_end
    lo = 0.1 * hi if t_burn is None else t_burn
    if not lo < hi:
        raise ValueError("t_burn must be smaller than the window end")
    mask = (t >= lo) & (t <= hi)
    if mask.sum() < 2:
        raise ValueError("empty estimation window")
    return mask, (float(lo), float(hi))


def _batch_se(t: np.ndarray, y: np.ndarray, batches: int = 10) -> float:
    # spread of increment rates over consecutive blocks
    edges = np.linspace(0, t.size - 1, batches + 1).astype(int)
    rates = [(y[b] - y[a]) / (t[b] - t[a]) for a, b in zip(edges[:-1], edges[1:]) if t[b] > t[a]]
    if len(rates) < 2:
        return 0.0
    return float(np.std(rates, ddof=1) / math.sqrt(len(rates)))


def estimate_velocity(trajs, t_burn: Optional[float] = None,
                      t_end: Optional[float] = None) -> VelocityEstimate:
    """Least-squares slopes of the leftmost and rightmost particles.

    With several trajectories the slopes are averaged and the standard
    error comes from their spread; a single trajectory uses batch means
    over ten consecutive blocks of the window.
    """
    if not isinstance(trajs, (list, tuple)):
        trajs = [trajs]
    lows, highs = [], []
    window = None
    for tr in trajs:
        mask, window = _window(tr, t_burn, t_end)
        t = np.asarray(tr.sample_times)[mask]
        lows.append(_ols_slope(t, np.asarray(tr.leftmost)[mask]))
        highs.append(_ols_slope(t, np.asarray(tr.rightmost)[mask]))
    lows, highs = np.array(lows), np.array(highs)
    if len(trajs) == 1:
        tr = trajs[0]
        mask, _ = _window(tr, t_burn, t_end)
        t = np.asarray(tr.sample_times)[mask]
        se_lo = _batch_se(t, np.asarray(tr.leftmost)[mask])
        se_hi = _batch_se(t, np.asarray(tr.rightmost)[mask])
    else:
        r = math.sqrt(len(trajs))
        se_lo, se_hi = float(lows.std(ddof=1) / r), float(highs.std(ddof=1) / r)
    return VelocityEstimate(float(lows.mean()), float(highs.mean()), max(se_lo, se_hi),
                            window, se_lo, se_hi, len(trajs))


def common_slope(trajs, t_burn=None, t_end=None) -> Tuple[float, float]:
    """Per-replica average of the two extreme slopes: (mean, stderr)."""
    vals = []
    for tr in trajs:
        e = estimate_velocity(tr, t_burn, t_end)
        vals.append(e.v_hat)
    vals = np.array(vals)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def estimate_mu_c(n_particles: int, seeds: Sequence[int], horizon: float,
                  sub_step: float = 1.0, t_burn: Optional[float] = None) -> VelocityEstimate:
    """Simulated N-BBM velocity, used as the critical drift estimate."""
    trajs = []
    for s in seeds:
        p = SimParams(n_particles, 0.0, horizon, sub_step, s)
        trajs.append(simulate(ProcessKind.NBBM, p, np.zeros(n_particles),
                              make_driver_bundle(s, n_particles), record_events=False))
    return estimate_velocity(trajs, t_burn)


def _neg_fraction_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fraction of each segment where the linear interpolant from a to b is < 0."""
    out = np.where((a < 0) & (b < 0), 1.0, 0.0)
    up = (a < 0) & (b >= 0)
    down = (a >= 0) & (b < 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = a / (a - b)
    out = np.where(up, s0, out)
    out = np.where(down, 1.0 - s0, out)
    return out


def occupation_fraction(times: np.ndarray, values: np.ndarray, t: float) -> float:
    """Fraction of [0, t] with the piecewise-linear path below 0."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if t > times[-1] * (1 + 1e-12):
        raise ValueError("t exceeds the recorded horizon")
    if t <= 0:
        raise ValueError("t must be > 0")
    keep = times < t
    tt = np.append(times[keep], t)
    vv = np.append(values[keep], np.interp(t, times, values))
    frac = _neg_fraction_linear(vv[:-1], vv[1:])
    return float(np.clip(np.dot(frac, np.diff(tt)) / t, 0.0, 1.0))


def occupation_fraction_negative(traj: Trajectory, t: float, rank: int = 1,
                                 side: str = "negative") -> float:
    """Fraction of [0, t] during which the rank-``rank`` particle is < 0.

    ``side="positive"`` measures time spent > 0 instead, which is the
    negative occupation of the mirrored path.
    """
    if traj.grid_times is None:
        raise ValueError("occupation needs grid sampling")
    v = traj.grid_positions[:, rank - 1]
    if side == "positive":
        v = -v
    elif side != "negative":
        raise ValueError("side must be 'negative' or 'positive'")
    return occupation_fraction(traj.grid_times, v, t)


def rescale_path(traj: Trajectory, m: float, t_end: Optional[float] = None,
                 stride: int = 1, rank: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Samples of ``t -> m^{-1/2} X_rank(m t)`` on the grid ``k*stride*sub_step/m``."""
    if traj.grid_times is None:
        raise ValueError("rescaling needs grid sampling")
    if m <= 0:
        raise ValueError("scale must be > 0")
    gt = traj.grid_times
    last = gt.size - 1 if t_end is None else int(round(t_end * m / traj.params.sub_step))
    if last > gt.size - 1:
        raise ValueError("scale exceeds recorded data: m*t_end is beyond the horizon")
    idx = np.arange(0, last + 1, stride)
    return gt[idx] / m, traj.grid_positions[idx, rank - 1] / math.sqrt(m)


def remove_negative_excursions(values: Sequence[float], dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete time change deleting the negative excursions of a sampled path.

    Nonnegative samples are kept in order and re-timed ``0, dt, 2dt, ...``.
    """
    v = np.asarray(values, dtype=float)
    kept = v[v >= 0]
    return np.arange(kept.size) * float(dt), kept


def g_transform_at(values: Sequence[float], dt: float, t: float) -> Optional[float]:
    """Value at time ``t`` of the excursion-removed path, or None if too short."""
    _, kept = remove_negative_excursions(values, dt)
    k = int(round(t / dt))
    return float(kept[k]) if k < kept.size else None


@dataclass
class DiffusionConstants:
    d_eff: float
    d_eff_stderr: float
    t_eval: float
    n_replicas: int
    beta: Optional[float] = None
    sigma2: Optional[float] = None


def estimate_diffusivity(replicas: Sequence[Trajectory], t_eval: float,
                         rank: int = 1) -> DiffusionConstants:
    """Var(X_rank(t_eval)) / t_eval across replicas, with a jackknife error.

    The regeneration gap and per-cycle variance are not separately
    estimable from this, so ``beta`` and ``sigma2`` stay ``None``.
    """
    if len(replicas) < 30:
        raise ValueError("estimate_diffusivity needs at least 30 replicas")
    x = np.array([tr.config_at(t_eval)[rank - 1] for tr in replicas])
    return diffusivity_from_samples(x, t_eval)


def diffusivity_from_samples(x: np.ndarray, t_eval: float) -> DiffusionConstants:
    x = np.asarray(x, dtype=float)
    n = x.size
    d = float(x.var(ddof=1) / t_eval)
    loo = np.array([np.delete(x, i).var(ddof=1) / t_eval for i in range(n)])
    se = float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return DiffusionConstants(d, se, float(t_eval), n)


def ks_statistic(samples: Sequence[float], cdf: Callable[[np.ndarray], np.ndarray]) -> Tuple[float, float]:
    """One-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    x = np.sort(np.asarray(samples, dtype=float))
    if np.any(np.isnan(x)):
        raise ValueError("NaN sample")
    n = x.size
    if n < 8:
        raise ValueError("ks_statistic needs at least 8 samples")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))
    return d, float(sps.kstwobign.sf(math.sqrt(n) * d))


def half_normal_cdf(scale: float) -> Callable[[np.ndarray], np.ndarray]:
    def cdf(x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, 2 * sps.norm.cdf(x / scale) - 1, 0.0)
    return cdf


# increasing path functionals for the association check
def _z1_end(tr: Trajectory) -> float:
    return float(tr.leftmost[-1])


def _zn_end(tr: Trajectory) -> float:
    return float(tr.rightmost[-1])


def _max_zn(tr: Trajectory) -> float:
    return float(np.max(tr.rightmost))


def _int_z1(tr: Trajectory) -> float:
    return float(np.trapezoid(tr.leftmost, tr.sample_times))


FUNCTIONALS: Dict[str, Callable[[Trajectory], float]] = {
    "Z1_T": _z1_end,
    "ZN_T": _zn_end,
    "max_ZN": _max_zn,
    "int_Z1": _int_z1,
}


@dataclass
class AssociationResult:
    cov: float
    lower: float
    upper: float
    n_replicas: int


def association_covariance(f, g, replicas: Sequence[Trajectory], n_boot: int = 2000,
                           level: float = 0.99, seed: int = 0) -> AssociationResult:
    """Sample covariance of f and g with a percentile bootstrap interval.

    ``f`` and ``g`` are callables or names from :data:`FUNCTIONALS`. The
    nonnegativity conclusion only applies when both are increasing in the
    pathwise order; that is the caller's responsibility.
    """
    if len(replicas) < 30:
        raise ValueError("association_covariance needs at least 30 replicas")
    f = FUNCTIONALS[f] if isinstance(f, str) else f
    g = FUNCTIONALS[g] if isinstance(g, str) else g
    a = np.array([f(tr) for tr in replicas])
    b = np.array([g(tr) for tr in replicas])
    return covariance_ci(a, b, n_boot, level, seed)


def covariance_ci(a: np.ndarray, b: np.ndarray, n_boot: int = 2000, level: float = 0.99,
                  seed: int = 0) -> AssociationResult:
    n = a.size
    cov = float(np.cov(a, b, ddof=1)[0, 1])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, (n_boot, n))
    aa, bb = a[idx], b[idx]
    boot = ((aa - aa.mean(1, keepdims=True)) * (bb - bb.mean(1, keepdims=True))).sum(1) / (n - 1)
    lo, hi = np.quantile(boot, [(1 - level) / 2, (1 + level) / 2])
    return AssociationResult(cov, float(lo), float(hi), n)


@dataclass
class HittingTime:
    time: float
    censored: bool


def hitting_time_T0(nu, mu: float, drivers: Optional[DriverBundle] = None, *,
                    horizon: float = 1000.0, sub_step: float = 0.01, seed: int = 0) -> HittingTime:
    """First grid or event time at which the rightmost N-BBM particle is >= 0."""
    cfg = nu if isinstance(nu, Configuration) else rank_sort(nu)
    if cfg.positions[-1] > 0:
        raise ValueError("rightmost initial particle must be at -s with s >= 0")
    if cfg.positions[-1] >= 0:
        return HittingTime(0.0, False)
    n = len(cfg)
    if drivers is None:
        drivers = make_driver_bundle(seed, n)
    tr = simulate(ProcessKind.NBBM, SimParams(n, mu, horizon, sub_step, seed), cfg, drivers,
                  record_events=False, record_grid=False,
                  stop_when=lambda rows: rows[:, -1] >= 0)
    if tr.stopped_at is None:
        return HittingTime(horizon, True)
    return HittingTime(tr.stopped_at, False)


@dataclass
class ReturnTimes:
    gaps: np.ndarray
    indices: np.ndarray
    empty: bool


def return_times_to_A(traj: Trajectory, t0: float, half_width: float = 1.0) -> ReturnTimes:
    """Gaps between skeleton steps ``n >= 1`` with every particle in [-1, 1].

    The first gap is measured from ``n = 0``.
    """
    if not t0 > 0:
        raise ValueError("t0 must be > 0")
    if traj.grid_times is None:
        raise ValueError("return times need grid sampling")
    stride = t0 / traj.params.sub_step
    if abs(stride - round(stride)) > 1e-9:
        raise ValueError("t0 must be a multiple of the grid step")
    stride = int(round(stride))
    skel = traj.grid_positions[::stride]
    inside = np.all(np.abs(skel) <= half_width, axis=1)
    idx = np.flatnonzero(inside[1:]) + 1
    gaps = np.diff(np.concatenate(([0], idx)))
    return ReturnTimes(gaps, idx, idx.size == 0)


class Regime(str, Enum):
    SUB_CRITICAL = "SubCritical"
    CRITICAL = "Critical"
    SUPER_CRITICAL = "SuperCritical"


@dataclass
class RegimeReport:
    mu: float
    mu_c_hat: float
    regime: Regime
    evidence: Dict[str, object] = field(default_factory=dict)


def classify_regime(mu: float, mu_c_hat: float, mu_c_stderr: float,
                    diagnostics: Optional[Dict[str, float]] = None) -> RegimeReport:
    """Three-way classification of a drift against the estimated critical value.

    ``diagnostics`` may carry ``slope`` and ``slope_stderr`` (common slope
    of the extreme particles) and ``max_slope`` (slope of the rightmost
    particle's excursion). A super-critical call requires the slope to
    match ``(|mu| - mu_c_hat) * sign(mu)`` within three standard errors;
    a contradiction is flagged as ``Inconclusive`` in the evidence while
    the regime still follows the ``|mu|`` rule.
    """
    if not mu_c_hat > 0:
        raise ValueError("mu_c_hat must be positive")
    ev: Dict[str, object] = dict(diagnostics or {})
    margin = 3.0 * mu_c_stderr
    ev["margin"] = margin
    a = abs(mu)
    if a < mu_c_hat - margin:
        regime = Regime.SUB_CRITICAL
        slope = ev.get("slope")
        se = ev.get("slope_stderr")
        if slope is not None and se is not None and abs(slope) > 3 * se + 3 * mu_c_stderr:
            ev["Inconclusive"] = "sub-critical drift but the cloud is moving"
    elif a > mu_c_hat + margin:
        regime = Regime.SUPER_CRITICAL
        expected = (a - mu_c_hat) * math.copysign(1.0, mu)
        ev["expected_slope"] = expected
        slope = ev.get("slope")
        se = ev.get("slope_stderr")
        if slope is not None and se is not None:
            tol = 3.0 * math.hypot(se, mu_c_stderr)
            ev["slope_matches"] = abs(slope - expected) <= tol
            if not ev["slope_matches"]:
                ev["Inconclusive"] = "measured slope does not match the super-critical prediction"
    else:
        regime = Regime.CRITICAL
    return RegimeReport(mu, mu_c_hat, regime, ev)
