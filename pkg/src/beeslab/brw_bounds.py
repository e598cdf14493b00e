"""Cumulant calculus for branching random walks and the two N-BRW processes
whose speeds bound the N-BBM velocity from above and below.

The upper process runs a full binary BBM for one unit of time and keeps
the N rightmost particles. The lower process runs generations of length
``delta`` with at most one branching per particle and keeps the
``N // 2`` rightmost.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .drivers import DriverBundle, make_driver_bundle


class PopulationExplosion(RuntimeError):
    """A generation produced more offspring than the configured cap."""


def kappa_bbm(theta: float) -> float:
    if theta <= 0:
        raise ValueError("theta must be > 0")
    return 1.0 + 0.5 * theta * theta


def _log_two_minus_exp(delta: float) -> float:
    # log(2 - e^{-delta}) without cancellation for small delta
    return math.log1p(-math.expm1(-delta))


def kappa_hat_delta(theta: float, delta: float) -> float:
    if theta <= 0 or delta <= 0:
        raise ValueError("theta and delta must be > 0")
    return 0.5 * theta * theta * delta + _log_two_minus_exp(delta)


@dataclass(frozen=True)
class CumulantSpec:
    """Log-Laplace transform of one generation's offspring point process.

    ``step`` is the duration of a generation; speeds are reported per unit
    time, so per-generation quantities are divided by it. Missing
    derivatives fall back to central differences, ``h = 1e-6 * theta`` for
    the first and ``h = 1e-4 * theta`` for the second (a smaller step there
    is dominated by rounding).
    """
    kappa: Callable[[float], float]
    kappa_prime: Optional[Callable[[float], float]] = None
    kappa_double_prime: Optional[Callable[[float], float]] = None
    domain: Tuple[float, float] = (1e-6, 1e3)
    step: float = 1.0

    def __post_init__(self):
        lo, hi = self.domain
        if not 0 < lo < hi:
            raise ValueError("domain must satisfy 0 < lo < hi")
        if self.step <= 0:
            raise ValueError("step must be > 0")

    def d1(self, theta: float) -> float:
        if self.kappa_prime is not None:
            return self.kappa_prime(theta)
        h = 1e-6 * theta
        return (self.kappa(theta + h) - self.kappa(theta - h)) / (2 * h)

    def d2(self, theta: float) -> float:
        if self.kappa_double_prime is not None:
            return self.kappa_double_prime(theta)
        h = 1e-4 * theta
        k = self.kappa
        return (k(theta + h) - 2.0 * k(theta) + k(theta - h)) / (h * h)

    def is_convex(self, samples: int = 32) -> bool:
        lo, hi = self.domain
        th = np.geomspace(lo, hi, samples)
        if self.kappa_double_prime is not None:
            return bool(all(self.d2(float(t)) >= -1e-8 for t in th))
        # chord slopes must not decrease; pointwise differences near lo are rounding noise
        k = np.array([self.kappa(float(t)) for t in th])
        slopes = np.diff(k) / np.diff(th)
        tol = 1e-9 * (1.0 + np.abs(slopes[1:]))
        return bool(np.all(np.diff(slopes) >= -tol))


def bbm_cumulant() -> CumulantSpec:
    return CumulantSpec(kappa_bbm, lambda t: t, lambda t: 1.0)


def hat_delta_cumulant(delta: float) -> CumulantSpec:
    if delta <= 0:
        raise ValueError("delta must be > 0")
    return CumulantSpec(lambda t: kappa_hat_delta(t, delta), lambda t: t * delta,
                        lambda t: delta, step=delta)


def theta_star_residual(cumulant: CumulantSpec, theta: float) -> float:
    return theta * cumulant.d1(theta) - cumulant.kappa(theta)


def solve_theta_star(cumulant: CumulantSpec, bracket: Optional[Tuple[float, float]] = None) -> float:
    """Root of ``theta * kappa'(theta) = kappa(theta)`` by bisection.

    Bisection runs until the bracket cannot be split further in floating
    point, which is well inside a relative tolerance of 1e-12.
    """
    lo, hi = bracket if bracket is not None else cumulant.domain
    flo, fhi = theta_star_residual(cumulant, lo), theta_star_residual(cumulant, hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ValueError(f"no sign change of theta*kappa' - kappa on [{lo}, {hi}]")
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = theta_star_residual(cumulant, mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return lo if abs(flo) <= abs(theta_star_residual(cumulant, hi)) else hi


def speed_second_order(cumulant: CumulantSpec, n: int) -> float:
    """Two-term speed ``(kappa'(t*) - pi^2 t* kappa''(t*) / (2 log^2 N)) / step``."""
    if n < 2:
        raise ValueError("N must be >= 2")
    th = solve_theta_star(cumulant)
    corr = math.pi ** 2 * th * cumulant.d2(th) / (2.0 * math.log(n) ** 2)
    return (cumulant.d1(th) - corr) / cumulant.step


class BRWKind(str, Enum):
    UPPER = "UpperZN1"
    LOWER = "LowerYNdelta"


@dataclass(frozen=True)
class BRWParams:
    n_keep: int
    step: float
    kind: BRWKind

    def __post_init__(self):
        if self.n_keep < 1:
            raise ValueError("n_keep must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")


@dataclass
class BRWTrajectory:
    params: BRWParams
    times: np.ndarray
    leftmost: np.ndarray
    rightmost: np.ndarray
    final: np.ndarray

    @property
    def sample_times(self) -> np.ndarray:
        return self.times


def _gen(drivers):
    return drivers.brw if isinstance(drivers, DriverBundle) else drivers


def bbm_generation(rng, positions: np.ndarray, duration: float, mu: float = 0.0,
                   cap: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Binary rate-1 BBM run for ``duration`` from each of ``positions``.

    Returns offspring positions and, for each, the index of its ancestor.
    Branch times are exponential and displacements Gaussian, so the law is
    exact. ``cap`` bounds the total offspring count.
    """
    pos = np.asarray(positions, dtype=float).copy()
    rem = np.full(pos.size, float(duration))
    anc = np.arange(pos.size)
    out_pos, out_anc = [], []
    total = pos.size
    while pos.size:
        tau = rng.exponential(1.0, pos.size)
        done = tau >= rem
        step = np.where(done, rem, tau)
        pos = pos + np.sqrt(step) * rng.standard_normal(pos.size) + mu * step
        out_pos.append(pos[done])
        out_anc.append(anc[done])
        keep = ~done
        pos, rem, anc = pos[keep], rem[keep] - step[keep], anc[keep]
        total += pos.size
        if cap is not None and total > cap:
            raise PopulationExplosion(f"generation exceeded {cap} offspring")
        pos, rem, anc = np.repeat(pos, 2), np.repeat(rem, 2), np.repeat(anc, 2)
    p = np.concatenate(out_pos) if out_pos else np.empty(0)
    a = np.concatenate(out_anc) if out_anc else np.empty(0, dtype=int)
    return p, a


def one_branch_generation(rng, positions: np.ndarray, delta: float,
                          mu: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """One generation of length ``delta`` allowing at most one branching."""
    pos = np.asarray(positions, dtype=float)
    n = pos.size
    tau = rng.exponential(1.0, n)
    split = tau < delta
    first = np.where(split, tau, delta)
    mid = pos + np.sqrt(first) * rng.standard_normal(n) + mu * first
    s_idx = np.flatnonzero(split)
    rest = delta - tau[s_idx]
    kids = (np.repeat(mid[s_idx], 2) + np.sqrt(np.repeat(rest, 2)) * rng.standard_normal(2 * s_idx.size)
            + mu * np.repeat(rest, 2))
    p = np.concatenate((mid[~split], kids))
    a = np.concatenate((np.flatnonzero(~split), np.repeat(s_idx, 2)))
    return p, a


def _keep_rightmost(p: np.ndarray, k: int) -> np.ndarray:
    if p.size <= k:
        return np.sort(p)
    return np.sort(np.partition(p, p.size - k)[p.size - k:])


def _run(params: BRWParams, generations: int, rng, advance, initial) -> BRWTrajectory:
    if generations < 1:
        raise ValueError("generations must be >= 1")
    pos = np.sort(np.zeros(params.n_keep) if initial is None else np.asarray(initial, dtype=float))
    lo = np.empty(generations + 1)
    hi = np.empty(generations + 1)
    lo[0], hi[0] = pos[0], pos[-1]
    for g in range(1, generations + 1):
        pos = _keep_rightmost(advance(rng, pos), params.n_keep)
        lo[g], hi[g] = pos[0], pos[-1]
    times = np.arange(generations + 1) * params.step
    return BRWTrajectory(params, times, lo, hi, pos)


def simulate_nbrw_upper(n: int, mu: float, generations: int, drivers=None, *,
                        seed: int = 0, initial=None) -> BRWTrajectory:
    """Unit-time BBM generations, each followed by keeping the N rightmost."""
    if n < 1:
        raise ValueError("N must be >= 1")
    rng = _gen(drivers if drivers is not None else make_driver_bundle(seed, n))
    params = BRWParams(n, 1.0, BRWKind.UPPER)
    cap = 64 * n

    def advance(r, pos):
        return bbm_generation(r, pos, 1.0, mu, cap)[0]
    return _run(params, generations, rng, advance, initial)


def simulate_nbrw_lower(n: int, delta: float, mu: float, generations: int, drivers=None, *,
                        seed: int = 0, initial=None) -> BRWTrajectory:
    """Generations of length ``delta`` with at most one branching, keeping N // 2."""
    if n < 2:
        raise ValueError("N must be >= 2")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    rng = _gen(drivers if drivers is not None else make_driver_bundle(seed, n))
    params = BRWParams(n // 2, float(delta), BRWKind.LOWER)

    def advance(r, pos):
        return one_branch_generation(r, pos, delta, mu)[0]
    return _run(params, generations, rng, advance, initial)


@dataclass
class SampledPath:
    """Extremes of a population sampled at generation boundaries."""
    times: np.ndarray
    leftmost: np.ndarray
    rightmost: np.ndarray
    final: np.ndarray

    @property
    def sample_times(self) -> np.ndarray:
        return self.times


@dataclass
class PairedRun:
    """A bounding N-BRW and an N-BBM built from common randomness.

    ``violations`` lists generation boundaries where the sorted lower
    population exceeded the sorted upper one in some rank; the coupling
    makes this impossible, so a non-empty list signals a bug.
    """
    bound: BRWTrajectory
    nbbm: SampledPath
    violations: list


def _rank_dominated(low: np.ndarray, high: np.ndarray) -> bool:
    # sorted low must sit below the top len(low) entries of sorted high
    return bool(np.all(np.sort(low) <= np.sort(high)[high.size - low.size:]))


def paired_upper_nbbm(n: int, mu: float, generations: int, *, seed: int = 0,
                      initial=None) -> PairedRun:
    """Upper N-BRW and N-BBM driven by one binary BBM tree per generation.

    Each N-BBM particle rides a distinct tree lineage shifted down by a
    nonnegative offset. A tree branching on a ridden lineage branches the
    N-BBM particle onto both children, after which the N-BBM drops its
    leftmost particle. At each integer time the tree is cut to its N
    rightmost particles and N-BBM particles are re-seated on them rank by
    rank, so the N-BBM marginal is exact and stays below the upper process.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    if generations < 1:
        raise ValueError("generations must be >= 1")
    rng = make_driver_bundle(seed, n, replica=2).brw
    cap = 64 * n
    up = np.sort(np.zeros(n) if initial is None else np.asarray(initial, dtype=float))
    x = up.copy()
    lo_u, hi_u, lo_x, hi_x = (np.empty(generations + 1) for _ in range(4))
    lo_u[0], hi_u[0], lo_x[0], hi_x[0] = up[0], up[-1], x[0], x[-1]
    violations = []
    tree = np.empty(cap + 1)
    for g in range(1, generations + 1):
        size = n
        tree[:n] = up
        rider = list(range(n))          # tree index ridden by each N-BBM particle
        offset = list(up - x)
        owner = {i: i for i in range(n)}
        t = 0.0
        while True:
            gap = rng.exponential(1.0 / size)
            dt = min(gap, 1.0 - t)
            tree[:size] += math.sqrt(dt) * rng.standard_normal(size) + mu * dt
            t += gap
            if t >= 1.0:
                break
            b = int(rng.integers(size))
            if size >= cap:
                raise PopulationExplosion(f"generation exceeded {cap} offspring")
            tree[size] = tree[b]
            child = size
            size += 1
            a = owner.get(b)
            if a is None:
                continue
            rider.append(child)
            offset.append(offset[a])
            owner[child] = len(rider) - 1
            pos = tree[rider] - np.array(offset)
            k = int(np.argmin(pos))
            del owner[rider[k]]
            rider.pop(k)
            offset.pop(k)
            owner = {r: i for i, r in enumerate(rider)}
        x = np.sort(tree[rider] - np.array(offset))
        up = _keep_rightmost(tree[:size], n)
        if not _rank_dominated(x, up):
            violations.append(float(g))
        lo_u[g], hi_u[g], lo_x[g], hi_x[g] = up[0], up[-1], x[0], x[-1]
    times = np.arange(generations + 1, dtype=float)
    bound = BRWTrajectory(BRWParams(n, 1.0, BRWKind.UPPER), times, lo_u, hi_u, up)
    return PairedRun(bound, SampledPath(times, lo_x, hi_x, x), violations)


def paired_lower_nbbm(n: int, delta: float, mu: float, generations: int, *, seed: int = 0,
                      initial=None) -> PairedRun:
    """Lower N-BRW riding the lineages of an exactly simulated N-BBM.

    Each lower particle follows a distinct N-BBM particle with a
    nonnegative offset. Its first guide branching in a generation splits
    it onto both children; later ones are ignored. When the N-BBM kills a
    guide, the rider moves to the leftmost unridden survivor, which sits
    no lower. There are at most ``2 * (N // 2) <= N`` riders, so a free
    survivor always exists and the lower process stays below the N-BBM.
    """
    if n < 2:
        raise ValueError("N must be >= 2")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if generations < 1:
        raise ValueError("generations must be >= 1")
    rng = make_driver_bundle(seed, n, replica=3).brw
    m = n // 2
    x = np.sort(np.zeros(n) if initial is None else np.asarray(initial, dtype=float))
    low = x[n - m:].copy()
    lo_l, hi_l, lo_x, hi_x = (np.empty(generations + 1) for _ in range(4))
    lo_l[0], hi_l[0], lo_x[0], hi_x[0] = low[0], low[-1], x[0], x[-1]
    violations = []
    buf = np.empty(n + 1)
    for g in range(1, generations + 1):
        buf[:n] = x
        guide = list(range(n - m, n))
        offset = list(x[n - m:] - low)
        split = [False] * m
        owner = {j: i for i, j in enumerate(guide)}
        t = 0.0
        while True:
            gap = rng.exponential(1.0 / n)
            dt = min(gap, delta - t)
            buf[:n] += math.sqrt(dt) * rng.standard_normal(n) + mu * dt
            t += gap
            if t >= delta:
                break
            b = int(rng.integers(n))
            buf[n] = buf[b]
            a = owner.get(b)
            if a is not None and not split[a]:
                split[a] = True
                guide.append(n)
                offset.append(offset[a])
                split.append(True)
                owner[n] = len(guide) - 1
            k = int(np.argmin(buf[:n + 1]))
            ak = owner.pop(k, None)
            if ak is not None:
                free = [j for j in range(n + 1) if j != k and j not in owner]
                j = min(free, key=lambda i: buf[i])
                offset[ak] += buf[j] - buf[k]
                guide[ak] = j
                owner[j] = ak
            # compact: move slot n into the hole at k
            if k != n:
                buf[k] = buf[n]
                ak = owner.pop(n, None)
                if ak is not None:
                    guide[ak] = k
                    owner[k] = ak
        low = _keep_rightmost(buf[guide] - np.array(offset), m)
        order = np.argsort(buf[:n], kind="stable")
        x = buf[:n][order]
        if not _rank_dominated(low, x):
            violations.append(g * float(delta))
        lo_l[g], hi_l[g], lo_x[g], hi_x[g] = low[0], low[-1], x[0], x[-1]
    times = np.arange(generations + 1) * float(delta)
    bound = BRWTrajectory(BRWParams(m, float(delta), BRWKind.LOWER), times, lo_l, hi_l, low)
    return PairedRun(bound, SampledPath(times, lo_x, hi_x, x), violations)


SWEEP_HEADER = ("kind", "N", "delta", "speed_hat", "stderr", "speed_formula")


def write_speed_sweep(rows: Sequence[Sequence], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r[0], r[1]] + [format(float(x), ".17g") if x is not None else "" for x in r[2:]])
