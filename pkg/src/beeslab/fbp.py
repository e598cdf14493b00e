"""Explicit finite-difference solver for the free boundary problem
``u_t = u_xx / 2 - mu u_x + u`` with ``int u = 1`` on the moving support.

Each step applies central diffusion, upwind advection and linear growth,
then trims the surplus mass from the cells furthest from the origin, the
density analogue of killing the bee furthest from 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .engine import Configuration

MASS_TOL = 1e-10
STEADY_RADIUS = math.pi / (2.0 * math.sqrt(2.0))


class FBPError(RuntimeError):
    """Invariant failure in the solver (mass, positivity or domain)."""


@dataclass(frozen=True)
class PDEParams:
    half_width: float = 4.0
    h: float = 0.01
    dt: float = 1e-4
    mu: float = 0.0
    end_time: float = 20.0

    def __post_init__(self):
        errs = []
        if not self.h > 0:
            errs.append("h must be > 0")
        if not self.dt > 0:
            errs.append("dt must be > 0")
        if not self.half_width > 0:
            errs.append("half_width must be > 0")
        if not self.end_time >= 0:
            errs.append("end_time must be >= 0")
        if errs:
            raise ValueError("; ".join(errs))
        k = self.half_width / self.h
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ValueError("half_width must be a multiple of h")
        if self.dt > self.h ** 2 * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds the diffusion bound h^2={self.h ** 2}")
        # the centre coefficient 1 - dt/h^2 - |mu| dt/h + dt must stay >= 0
        if self.dt * (1.0 / self.h ** 2 + abs(self.mu) / self.h - 1.0) > 1.0 + 1e-12:
            raise ValueError("dt too large for a positive update at this drift; "
                             "need dt*(1/h^2 + |mu|/h - 1) <= 1")

    @property
    def n_cells(self) -> int:
        return 2 * int(round(self.half_width / self.h)) + 1

    @property
    def n_steps(self) -> int:
        n = self.end_time / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ValueError("end_time must be an integer number of steps")
        return int(round(n))

    def grid(self) -> np.ndarray:
        m = int(round(self.half_width / self.h))
        return np.arange(-m, m + 1) * self.h


@dataclass(frozen=True)
class PDEState:
    grid: np.ndarray
    u: np.ndarray
    radius: float
    time: float = 0.0

    @property
    def h(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def mass(self) -> float:
        return float(self.h * self.u.sum())

    def check(self) -> None:
        if abs(self.mass - 1.0) > MASS_TOL:
            raise FBPError(f"mass {self.mass!r} differs from 1 at t={self.time}")
        if np.any(self.u < 0):
            raise FBPError(f"negative density at t={self.time}")
        if np.any(self.u[np.abs(self.grid) > self.radius + 1e-12] != 0):
            raise FBPError("density outside the radius")


def _radius(grid: np.ndarray, u: np.ndarray) -> float:
    nz = np.flatnonzero(u > 0)
    if nz.size == 0:
        return 0.0
    return float(max(-grid[nz[0]], grid[nz[-1]]))


def make_state(params: PDEParams, u: np.ndarray, time: float = 0.0) -> PDEState:
    """Normalize ``u`` to unit mass on the parameter grid."""
    grid = params.grid()
    u = np.asarray(u, dtype=float).copy()
    if u.shape != grid.shape:
        raise ValueError("density has the wrong length for this grid")
    if np.any(u < 0):
        raise ValueError("density must be nonnegative")
    m = params.h * u.sum()
    if not m > 0:
        raise ValueError("density has zero mass")
    u /= m
    return PDEState(grid, u, _radius(grid, u), time)


def uniform_initial(params: PDEParams, lo: float = -0.5, hi: float = 0.5) -> PDEState:
    g = params.grid()
    return make_state(params, ((g >= lo - 1e-12) & (g <= hi + 1e-12)).astype(float))


def steady_state_density(x) -> np.ndarray:
    """``cos(sqrt(2) x) / sqrt(2)`` on ``|x| <= pi / (2 sqrt 2)``, zero outside."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) <= STEADY_RADIUS, np.cos(math.sqrt(2.0) * x) / math.sqrt(2.0), 0.0)


def steady_state(params: PDEParams) -> PDEState:
    """Zero-drift steady profile sampled on the grid (renormalized to unit mass)."""
    return make_state(params, steady_state_density(params.grid()))


def _trim(u: np.ndarray, h: float, c: int) -> None:
    """Remove mass above 1 from the outermost cells, in place."""
    excess = h * u.sum() - 1.0
    if excess < -MASS_TOL:
        raise FBPError("mass fell below 1 during the growth step")
    if excess <= 0:
        return
    m = c
    left = u[c::-1]          # distances 0..m on the left
    right = u[c:]
    gm = left + right
    gm[0] = u[c]
    gm *= h
    # walk groups of equal |x| from the outside in
    cs = np.cumsum(gm[::-1])
    j = int(np.searchsorted(cs, excess))     # groups 0..j from outside touched
    d_cut = m - j
    removed_before = cs[j - 1] if j > 0 else 0.0
    if d_cut < m:
        u[: c - d_cut] = 0.0
        u[c + d_cut + 1:] = 0.0
    rest = excess - removed_before
    g = gm[d_cut]
    frac = 0.0 if g <= 0 else max(0.0, 1.0 - rest / g)
    if d_cut == 0:
        u[c] *= frac
    else:
        u[c - d_cut] *= frac
        u[c + d_cut] *= frac


def _advance(u: np.ndarray, params: PDEParams, buf: np.ndarray) -> np.ndarray:
    h, dt, mu = params.h, params.dt, params.mu
    a = 0.5 * dt / (h * h)
    b = abs(mu) * dt / h
    # buf holds u with a zero ghost cell at each end
    buf[1:-1] = u
    new = (1.0 - 2 * a - b + dt) * u + a * (buf[2:] + buf[:-2])
    if mu > 0:
        new += b * buf[:-2]
    elif mu < 0:
        new += b * buf[2:]
    return new


def step_fbp(state: PDEState, params: PDEParams) -> PDEState:
    """One explicit step followed by outside-in selection to unit mass."""
    if state.grid.shape[0] != params.n_cells:
        raise ValueError("state grid does not match params")
    buf = np.zeros(state.u.size + 2)
    u = _advance(state.u, params, buf)
    c = u.size // 2
    _trim(u, params.h, c)
    new = PDEState(state.grid, u, _radius(state.grid, u), state.time + params.dt)
    new.check()
    if new.radius >= 0.9 * params.half_width:
        raise FBPError(f"radius {new.radius} reached 0.9*L at t={new.time}")
    return new


@dataclass
class FBPResult:
    snapshots: List[PDEState]
    boundary_times: np.ndarray
    boundary_radius: np.ndarray
    max_mass_error: float
    final: PDEState = field(repr=False, default=None)


def solve_fbp(initial: PDEState, params: PDEParams, snapshot_every: Optional[float] = None,
              boundary_every: int = 1) -> FBPResult:
    """Step from ``initial`` to ``params.end_time``.

    Snapshots are taken every ``snapshot_every`` time units (default: only
    the start and the end); the boundary ``R_t`` is recorded every
    ``boundary_every`` steps. Mass and positivity are checked every step.
    """
    initial.check()
    n = params.n_steps
    snap_stride = n if snapshot_every is None else max(1, int(round(snapshot_every / params.dt)))
    grid, h = initial.grid, params.h
    u = initial.u.copy()
    c = u.size // 2
    buf = np.zeros(u.size + 2)
    limit = 0.9 * params.half_width
    snaps = [initial]
    bt = [initial.time]
    br = [initial.radius]
    worst = abs(initial.mass - 1.0)
    for s in range(1, n + 1):
        u = _advance(u, params, buf)
        _trim(u, h, c)
        err = abs(h * u.sum() - 1.0)
        worst = max(worst, err)
        t = initial.time + s * params.dt
        if err > MASS_TOL:
            raise FBPError(f"mass error {err:.3e} at t={t}")
        if u.min() < 0:
            raise FBPError(f"negative density at t={t}")
        if s % boundary_every == 0 or s == n or s % snap_stride == 0:
            r = _radius(grid, u)
            if r >= limit:
                raise FBPError(f"radius {r} reached 0.9*L at t={t}")
            if s % boundary_every == 0 or s == n:
                bt.append(t)
                br.append(r)
            if s % snap_stride == 0 or s == n:
                snaps.append(PDEState(grid, u.copy(), r, t))
    final = snaps[-1]
    return FBPResult(snaps, np.array(bt), np.array(br), worst, final)


def l1_distance(state: PDEState, density) -> float:
    """``h * sum |u - f(x)|`` against a density function on the same grid."""
    return float(state.h * np.abs(state.u - density(state.grid)).sum())


def mass_center(state: PDEState) -> float:
    return float(state.h * np.dot(state.grid, state.u))


def _edges(state: PDEState) -> np.ndarray:
    h = state.h
    return np.append(state.grid - h / 2, state.grid[-1] + h / 2)


def pde_cdf(state: PDEState, x) -> np.ndarray:
    """CDF of the piecewise-constant density (cells centred on grid points)."""
    e = _edges(state)
    F = np.concatenate(([0.0], np.cumsum(state.u) * state.h))
    return np.interp(x, e, F)


def pde_quantiles(state: PDEState, probs) -> np.ndarray:
    e = _edges(state)
    F = np.concatenate(([0.0], np.cumsum(state.u) * state.h))
    keep = np.concatenate(([True], np.diff(F) > 0))
    return np.interp(probs, F[keep], e[keep])


def _abs_linear_integral(fa: np.ndarray, fb: np.ndarray, w: np.ndarray) -> np.ndarray:
    same = fa * fb >= 0
    s = np.abs(fa) + np.abs(fb)
    with np.errstate(invalid="ignore", divide="ignore"):
        cross = np.where(s > 0, (fa * fa + fb * fb) / (2 * s), 0.0)
    return np.where(same, 0.5 * s, cross) * w


def distance_empirical_pde(config, state: PDEState) -> float:
    """Wasserstein-1 distance between ``(1/N) sum delta_{x_i}`` and the density.

    Computed exactly as the integral of ``|F_emp - F_pde|`` over the hull of
    both supports, with the density piecewise constant per cell.
    """
    x = np.sort(np.asarray(config.positions if isinstance(config, Configuration) else config,
                           dtype=float))
    n = x.size
    e = _edges(state)
    pts = np.unique(np.concatenate((e, x)))
    lo, hi = pts[0], pts[-1]
    pts = pts[(pts >= lo) & (pts <= hi)]
    a, b = pts[:-1], pts[1:]
    # empirical CDF is constant on (a, b)
    c = np.searchsorted(x, a, side="right") / n
    fa = pde_cdf(state, a) - c
    fb = pde_cdf(state, b) - c
    return float(_abs_linear_integral(fa, fb, b - a).sum())


def write_snapshots_csv(result: FBPResult, path) -> None:
    grid = result.snapshots[0].grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "R_t"] + [format(float(x), ".17g") for x in grid])
        for s in result.snapshots:
            w.writerow([format(s.time, ".17g"), format(s.radius, ".17g")]
                       + [format(float(v), ".17g") for v in s.u])


def write_boundary_csv(result: FBPResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "R_t"])
        for t, r in zip(result.boundary_times, result.boundary_radius):
            w.writerow([format(float(t), ".17g"), format(float(r), ".17g")])
