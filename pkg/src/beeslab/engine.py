"""Exact event-driven simulation of N-BBM and N-Brownian bees with drift.

Branching times come from a Poisson clock of intensity N. Between two
branching times every particle moves by an exact Gaussian increment, the
driver of rank ``j`` being frozen at the start of the interval. At a
branching time the ranked configuration is updated by ``apply_l`` (N-BBM:
duplicate rank ``i``, kill the leftmost) or ``apply_k`` (bees: duplicate
rank ``i``, kill the particle of largest magnitude).

Ranks in the public API are 1-based, matching the usual ``{1..N}`` labels.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .drivers import DriverBundle, make_driver_bundle


class ProcessKind(str, Enum):
    NBBM = "nbbm"
    BEES = "bees"


class KilledSide(IntEnum):
    LEFTMOST = 0
    LARGEST_MAGNITUDE_LEFT = 1
    LARGEST_MAGNITUDE_RIGHT = 2


class Configuration:
    """Ascending positions of N >= 1 particles. Immutable."""

    __slots__ = ("_pos",)

    def __init__(self, positions: Iterable[float], _trusted: bool = False):
        arr = np.array(positions, dtype=np.float64).reshape(-1)
        if not _trusted:
            if arr.size < 1:
                raise ValueError("a configuration needs at least one particle")
            if not np.all(np.isfinite(arr)):
                raise ValueError("configuration entries must be finite")
            if np.any(arr[1:] < arr[:-1]):
                raise ValueError("configuration must be sorted ascending; use rank_sort")
        arr.flags.writeable = False
        self._pos = arr

    @property
    def positions(self) -> np.ndarray:
        return self._pos

    def __len__(self) -> int:
        return self._pos.size

    def __iter__(self):
        return iter(self._pos.tolist())

    def __getitem__(self, item):
        return self._pos[item]

    def __array__(self, dtype=None, copy=None):
        return self._pos if dtype is None else self._pos.astype(dtype)

    def __eq__(self, other) -> bool:
        if isinstance(other, Configuration):
            return np.array_equal(self._pos, other._pos)
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._pos.tobytes())

    def __repr__(self) -> str:
        return f"Configuration({self._pos.tolist()})"


def _as_sorted_array(v) -> np.ndarray:
    if isinstance(v, Configuration):
        return v.positions
    return Configuration(v).positions


def rank_sort(raw: Sequence[float]) -> Configuration:
    """Rank the entries ascending; ties keep their original order."""
    arr = np.asarray(raw, dtype=np.float64).reshape(-1)
    if arr.size < 1:
        raise ValueError("a configuration needs at least one particle")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite entry")
    return Configuration(np.sort(arr, kind="stable"), _trusted=True)


def _counts_at_or_above(sorted_vals: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    return sorted_vals.size - np.searchsorted(sorted_vals, thresholds, side="left")


def compare_left_of(a, b) -> bool:
    """True iff ``a`` lies to the left of ``b``.

    That is, for every threshold c, a has no more entries >= c than b.
    The counts only change at entry values, so those are the only
    thresholds examined. Sizes may differ.
    """
    sa = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    sb = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if sa.size == 0 or sb.size == 0:
        raise ValueError("both configurations must be nonempty")
    if not (np.all(np.isfinite(sa)) and np.all(np.isfinite(sb))):
        raise ValueError("non-finite entry")
    c = np.union1d(sa, sb)
    return bool(np.all(_counts_at_or_above(sa, c) <= _counts_at_or_above(sb, c)))


def _check_rank(n: int, i: int) -> None:
    if not 1 <= i <= n:
        raise ValueError(f"rank {i} outside 1..{n}")


def _l(v: np.ndarray, p: int) -> np.ndarray:
    # p is 0-based; kill v[0], duplicate v[p]
    out = v.copy()
    out[:p] = v[1:p + 1]
    out[p] = v[p]
    return out


def _k_kills_left(v: np.ndarray) -> bool:
    return abs(v[0]) >= abs(v[-1])


def _k(v: np.ndarray, p: int) -> np.ndarray:
    if _k_kills_left(v):
        return _l(v, p)
    out = v.copy()
    out[p + 1:] = v[p:-1]
    return out


def apply_l(v, i: int) -> Configuration:
    """Duplicate the rank-``i`` particle and kill the leftmost."""
    arr = _as_sorted_array(v)
    _check_rank(arr.size, i)
    return Configuration(_l(arr, i - 1), _trusted=True)


def apply_k(v, i: int) -> Configuration:
    """Duplicate the rank-``i`` particle and kill the one of largest magnitude.

    On the tie ``|v_1| == |v_N|`` the leftmost is killed.
    """
    arr = _as_sorted_array(v)
    _check_rank(arr.size, i)
    return Configuration(_k(arr, i - 1), _trusted=True)


def advance_interval(config, dt: float, drift: float, gaussians: Sequence[float]) -> Configuration:
    """Move rank ``j`` by ``drift*dt + sqrt(dt)*gaussians[j]`` and re-rank."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    arr = _as_sorted_array(config)
    g = np.asarray(gaussians, dtype=np.float64).reshape(-1)
    if g.size != arr.size:
        raise ValueError(f"expected {arr.size} draws, got {g.size}")
    return rank_sort(arr + (math.sqrt(dt) * g + drift * dt))


@dataclass(frozen=True)
class SimParams:
    n_particles: int
    drift: float = 0.0
    horizon: float = 10.0
    sub_step: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if not self.sub_step > 0:
            raise ValueError("sub_step must be > 0")


@dataclass(frozen=True)
class EventRecord:
    time: float
    branch_index: int
    killed_side: KilledSide
    pre_config: Configuration
    post_config: Configuration


@dataclass
class Trajectory:
    """Record of one run.

    Event data is stored column-wise; ``events`` materializes
    :class:`EventRecord` objects on demand. ``grid_positions`` holds the
    ranked configuration at every multiple of ``params.sub_step`` up to
    the horizon (or the stopping time).
    """
    process_kind: ProcessKind
    params: SimParams
    initial: Configuration
    final: Configuration
    end_time: float
    event_times: np.ndarray
    event_index: np.ndarray
    event_killed: np.ndarray
    event_pre: Optional[np.ndarray] = None
    event_post: Optional[np.ndarray] = None
    grid_times: Optional[np.ndarray] = None
    grid_positions: Optional[np.ndarray] = None
    stopped_at: Optional[float] = None

    @property
    def n_particles(self) -> int:
        return self.params.n_particles

    @property
    def n_events(self) -> int:
        return self.event_times.size

    @property
    def events(self) -> List[EventRecord]:
        if self.event_pre is None or self.event_post is None:
            raise ValueError("trajectory was recorded without event configurations")
        return [
            EventRecord(float(t), int(i), KilledSide(int(k)),
                        Configuration(pre, _trusted=True), Configuration(post, _trusted=True))
            for t, i, k, pre, post in zip(self.event_times, self.event_index,
                                          self.event_killed, self.event_pre, self.event_post)
        ]

    @property
    def grid(self) -> List[tuple]:
        if self.grid_times is None:
            return []
        return [(float(t), Configuration(row, _trusted=True))
                for t, row in zip(self.grid_times, self.grid_positions)]

    def _samples(self):
        if self.grid_times is not None and self.grid_times.size:
            return self.grid_times, self.grid_positions
        if self.event_post is None:
            raise ValueError("trajectory has neither grid nor event configurations")
        times = np.concatenate(([0.0], self.event_times, [self.end_time]))
        rows = np.vstack([self.initial.positions[None, :], self.event_post,
                          self.final.positions[None, :]])
        return times, rows

    @property
    def sample_times(self) -> np.ndarray:
        return self._samples()[0]

    def rank_path(self, rank: int) -> np.ndarray:
        """Positions of the rank-``rank`` particle (1-based) at ``sample_times``."""
        return self._samples()[1][:, rank - 1]

    @property
    def leftmost(self) -> np.ndarray:
        return self.rank_path(1)

    @property
    def rightmost(self) -> np.ndarray:
        return self.rank_path(self.n_particles)

    def config_at(self, t: float) -> Configuration:
        """Grid configuration at time ``t`` (must be a grid time)."""
        if self.grid_times is None:
            raise ValueError("no grid recorded")
        k = int(round(t / self.params.sub_step))
        if k < 0 or k >= self.grid_times.size or not math.isclose(
                self.grid_times[k], t, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"time {t} is not a recorded grid time")
        return Configuration(self.grid_positions[k], _trusted=True)


StopRule = Callable[[np.ndarray], np.ndarray]


class _Recorder:
    def __init__(self, n: int, record_events: bool, record_grid: bool):
        self.n = n
        self.record_events = record_events
        self.record_grid = record_grid
        self.ev_t: List[float] = []
        self.ev_i: List[int] = []
        self.ev_k: List[int] = []
        self.ev_pre: List[np.ndarray] = []
        self.ev_post: List[np.ndarray] = []
        self.g_t: List[np.ndarray] = []
        self.g_x: List[np.ndarray] = []

    def grid(self, times: np.ndarray, rows: np.ndarray) -> None:
        if self.record_grid and times.size:
            self.g_t.append(times)
            self.g_x.append(rows)

    def event(self, t: float, i: int, k: int, pre: np.ndarray, post: np.ndarray) -> None:
        self.ev_t.append(t)
        self.ev_i.append(i)
        self.ev_k.append(k)
        if self.record_events:
            self.ev_pre.append(pre)
            self.ev_post.append(post)

    def build(self, kind, params, initial, final, end_time, stopped_at) -> Trajectory:
        n = self.n
        pre = post = None
        if self.record_events:
            pre = np.array(self.ev_pre).reshape(-1, n)
            post = np.array(self.ev_post).reshape(-1, n)
        gt = gx = None
        if self.record_grid:
            gt = np.concatenate(self.g_t) if self.g_t else np.empty(0)
            gx = np.vstack(self.g_x) if self.g_x else np.empty((0, n))
        return Trajectory(kind, params, initial, Configuration(final, _trusted=True), end_time,
                          np.array(self.ev_t, dtype=np.float64),
                          np.array(self.ev_i, dtype=np.int64),
                          np.array(self.ev_k, dtype=np.int8),
                          pre, post, gt, gx, stopped_at)


def grid_slice(k: int, end: float, sub_step: float, inclusive: bool) -> int:
    """First grid index ``k' >= k`` with ``k'*sub_step`` past ``end``.

    Grid points ``k..k'-1`` lie in ``[., end)``, or ``[., end]`` when
    ``inclusive``.
    """
    def inside(j):
        g = j * sub_step
        return g <= end * (1 + 1e-12) if inclusive else g < end
    stop = max(k, int(end / sub_step))
    while stop > k and not inside(stop - 1):
        stop -= 1
    while inside(stop):
        stop += 1
    return stop


def piece_increments(t: float, end: float, k: int, k_stop: int, sub_step: float,
                     draws: np.ndarray):
    """Brownian increments over the pieces ``[t, g_k, ..., g_{k_stop-1}, end]``.

    Returns the grid times and the per-piece driver increments ``dB``
    (shape ``(pieces, N)``) together with the piece lengths.
    """
    gtimes = np.arange(k, k_stop, dtype=np.float64) * sub_step
    dts = np.diff(np.concatenate(([t], gtimes, [end])))
    dts = np.maximum(dts, 0.0)
    db = np.sqrt(dts)[:, None] * draws
    return gtimes, db, dts


def _killed_side(kind: ProcessKind, v: np.ndarray) -> int:
    if kind is ProcessKind.NBBM:
        return KilledSide.LEFTMOST
    return KilledSide.LARGEST_MAGNITUDE_LEFT if _k_kills_left(v) else KilledSide.LARGEST_MAGNITUDE_RIGHT


def simulate(kind, params: SimParams, initial, drivers: Optional[DriverBundle] = None, *,
             record_events: bool = True, record_grid: bool = True,
             stop_when: Optional[StopRule] = None) -> Trajectory:
    """Run one N-BBM or bees trajectory on ``[0, params.horizon]``.

    ``stop_when`` receives a ``(k, N)`` block of ranked configurations
    (grid samples, or the configuration just before a branching) and
    returns a boolean per row; the run is truncated at the first true row
    and ``stopped_at`` is set to its time.
    """
    kind = ProcessKind(kind)
    n = params.n_particles
    init = rank_sort(initial) if not isinstance(initial, Configuration) else initial
    if len(init) != n:
        raise ValueError(f"initial configuration has {len(init)} particles, expected {n}")
    if drivers is None:
        drivers = make_driver_bundle(params.seed, n)
    elif drivers.n_particles != n:
        raise ValueError("driver bundle size does not match n_particles")
    op = _l if kind is ProcessKind.NBBM else _k
    mu, horizon, dsub = params.drift, params.horizon, params.sub_step

    rec = _Recorder(n, record_events, record_grid)
    pos = init.positions.copy()
    t = 0.0
    k = 0
    stopped_at = None
    while True:
        b = t + drivers.next_gap()
        last = b >= horizon
        end = horizon if last else b
        k_stop = grid_slice(k, end, dsub, inclusive=last)
        if k_stop == k:
            # no grid point inside: same arithmetic as the general branch
            dt = end - t
            pos = pos + (math.sqrt(dt) * drivers.gaussians(1)[0] + mu * dt)
        else:
            draws = drivers.gaussians(k_stop - k + 1)
            gtimes, db, dts = piece_increments(t, end, k, k_stop, dsub, draws)
            path = pos + np.cumsum(db + mu * dts[:, None], axis=0)
            rows = np.sort(path[:-1], axis=1)
            if stop_when is not None:
                hit = np.flatnonzero(stop_when(rows))
                if hit.size:
                    j = hit[0]
                    rec.grid(gtimes[:j + 1], rows[:j + 1])
                    stopped_at = float(gtimes[j])
                    pos = rows[j]
                    t = stopped_at
                    break
            rec.grid(gtimes, rows)
            k = k_stop
            pos = path[-1]
        if last:
            pos = np.sort(pos)
            t = horizon
            break
        pre = np.sort(pos)
        if stop_when is not None and stop_when(pre[None, :])[0]:
            stopped_at = b
            pos = pre
            t = b
            break
        i = drivers.next_index()
        post = op(pre, i - 1)
        rec.event(b, i, _killed_side(kind, pre), pre, post)
        pos = post
        t = b
    return rec.build(kind, params, init, pos, t, stopped_at)


def bridge_crossing_probability(x: float, y: float, dt: float) -> float:
    """Probability that a Brownian bridge from x to y over dt touches 0."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if x * y <= 0:
        return 1.0
    return math.exp(-2.0 * abs(x) * abs(y) / dt)


def bridge_crossing_probabilities(x: np.ndarray, y: np.ndarray, dt) -> np.ndarray:
    """Vectorized :func:`bridge_crossing_probability` (``dt > 0`` assumed)."""
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        p = np.exp(-2.0 * np.abs(x) * np.abs(y) / dt)
    return np.where(x * y <= 0, 1.0, p)


def first_hit_zero(traj: Trajectory, rng=None) -> Optional[float]:
    """Earliest record time at or after which some particle has touched 0.

    Each segment between consecutive records (grid samples, and the
    configuration just before/after each branching) is checked for a sign
    change, else for a bridge crossing with a Bernoulli draw. Particles are
    paired across a segment by rank, which is exact whenever ranks do not
    cross inside the segment (always for N = 1). The reported time is the
    end of the first segment containing a hit, or ``None``.
    """
    rng = np.random.default_rng(rng)
    times, rows = _hit_records(traj)
    if np.any(rows[0] == 0.0):
        return float(times[0])
    for a in range(len(times) - 1):
        dt = times[a + 1] - times[a]
        x, y = rows[a], rows[a + 1]
        if dt <= 0:
            continue
        p = bridge_crossing_probabilities(x, y, dt)
        u = rng.random(p.size)
        if np.any(u < p):
            return float(times[a + 1])
    return None


def _hit_records(traj: Trajectory):
    """Time-ordered records, splitting each branching into pre/post rows."""
    parts_t = [np.array([0.0])]
    parts_x = [traj.initial.positions[None, :]]
    if traj.grid_times is not None:
        parts_t.append(traj.grid_times)
        parts_x.append(traj.grid_positions)
    # pre rows sort just before post rows at the same time
    order_key = [np.zeros(1)]
    if traj.grid_times is not None:
        order_key.append(np.full(traj.grid_times.size, 2.0))
    if traj.n_events:
        if traj.event_pre is None:
            raise ValueError("hit detection needs event configurations")
        parts_t += [traj.event_times, traj.event_times]
        parts_x += [traj.event_pre, traj.event_post]
        order_key += [np.zeros(traj.n_events), np.ones(traj.n_events)]
    parts_t.append(np.array([traj.end_time]))
    parts_x.append(traj.final.positions[None, :])
    order_key.append(np.full(1, 3.0))
    t = np.concatenate(parts_t)
    x = np.vstack(parts_x)
    key = np.concatenate(order_key)
    idx = np.lexsort((key, t))
    return t[idx], x[idx]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Event rows (``branch``, post configuration) and grid rows (``sample``).

    At equal times the branching row comes first.
    """
    n = traj.n_particles
    rows = []
    if traj.n_events:
        if traj.event_post is None:
            raise ValueError("CSV export needs event configurations")
        for t, i, post in zip(traj.event_times, traj.event_index, traj.event_post):
            rows.append((t, 0, "branch", str(int(i)), post))
    if traj.grid_times is not None:
        for t, row in zip(traj.grid_times, traj.grid_positions):
            rows.append((t, 1, "sample", "", row))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "event_kind", "i"] + [f"pos_{j}" for j in range(1, n + 1)])
        for t, _, kind, i, row in rows:
            w.writerow([_fmt(t), kind, i] + [_fmt(x) for x in row])


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`: list of ``(time, kind, i, positions)``."""
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for rec in r:
            i = int(rec[2]) if rec[2] else None
            out.append((float(rec[0]), rec[1], i, np.array([float(x) for x in rec[3:]])))
    return out


_MIRROR_SIDE = np.array([0, 2, 1], dtype=np.int8)


def mirror_trajectory(traj: Trajectory) -> Trajectory:
    """Reflect space: ``x -> -x`` with ranks reversed."""
    def flip(a):
        return None if a is None else -a[..., ::-1]
    params = SimParams(traj.params.n_particles, -traj.params.drift, traj.params.horizon,
                       traj.params.sub_step, traj.params.seed)
    n = traj.n_particles
    return Trajectory(traj.process_kind, params,
                      Configuration(flip(traj.initial.positions), _trusted=True),
                      Configuration(flip(traj.final.positions), _trusted=True),
                      traj.end_time, traj.event_times.copy(), n + 1 - traj.event_index,
                      _MIRROR_SIDE[traj.event_killed], flip(traj.event_pre), flip(traj.event_post),
                      None if traj.grid_times is None else traj.grid_times.copy(),
                      flip(traj.grid_positions), traj.stopped_at)
