"""Keyed random streams shared by coupled simulations.

Every role (event clock, uniform indices, Brownian increments, bridge
uniforms, BRW offspring) draws from its own Philox stream keyed by
``(seed, replica, role)``. Two bundles built from the same key produce the
same numbers, so several processes can be driven by identical randomness
as long as they consume it in the same order.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

ROLES = ("clock", "index", "gauss", "bridge", "brw")
_BLOCK = 1024
SEED_MAX = 2**64


class DriverStreamExhausted(RuntimeError):
    """Raised when a bundle with an event budget runs out of events."""


def _generator(seed: int, replica: int, role: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(replica, ROLES.index(role)))
    return np.random.Generator(np.random.Philox(ss))


class DriverBundle:
    """Shared randomness ``(Q, I, B)`` for one replica.

    ``next_gap`` gives the inter-event times of a Poisson clock of
    intensity ``n_particles``; ``next_index`` gives ranks uniform on
    ``{1..N}``; ``gaussians(k)`` gives a ``(k, N)`` block of standard
    normals, column ``j`` feeding the driver of rank ``j``.

    With ``mirror=True`` the bundle realizes the reflected system: Gaussian
    columns are negated and reversed and indices map to ``N + 1 - I``, so a
    run from ``-reversed(nu)`` with drift ``-mu`` is the exact mirror image.
    """

    def __init__(self, seed: int, n_particles: int, replica: int = 0,
                 mirror: bool = False, max_events: Optional[int] = None):
        if n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0 <= int(seed) < SEED_MAX:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.n_particles = int(n_particles)
        self.replica = int(replica)
        self.mirror = mirror
        self.max_events = max_events
        self._gens = {role: _generator(self.seed, self.replica, role) for role in ROLES}
        self._gaps = np.empty(0)
        self._idx = np.empty(0, dtype=np.int64)
        self._gp = 0
        self._ip = 0
        self._gbuf = np.empty((0, self.n_particles))
        self._gbp = 0
        self.events_drawn = 0
        self.gaussians_drawn = 0

    def fresh(self) -> "DriverBundle":
        """An unconsumed bundle with the same key."""
        return DriverBundle(self.seed, self.n_particles, self.replica,
                            self.mirror, self.max_events)

    def next_gap(self) -> float:
        if self.max_events is not None and self.events_drawn >= self.max_events:
            raise DriverStreamExhausted(
                f"event budget of {self.max_events} exhausted (seed={self.seed})")
        if self._gp == len(self._gaps):
            self._gaps = self._gens["clock"].exponential(1.0 / self.n_particles, _BLOCK)
            self._gp = 0
        gap = self._gaps[self._gp]
        self._gp += 1
        self.events_drawn += 1
        return float(gap)

    def next_index(self) -> int:
        if self._ip == len(self._idx):
            self._idx = self._gens["index"].integers(1, self.n_particles + 1, _BLOCK)
            self._ip = 0
        i = int(self._idx[self._ip])
        self._ip += 1
        return self.n_particles + 1 - i if self.mirror else i

    def gaussians(self, k: int) -> np.ndarray:
        # buffered; the stream is consumed in order, so values do not depend on k
        avail = self._gbuf.shape[0] - self._gbp
        if k > avail:
            rows = max(k - avail, max(1, 8192 // self.n_particles))
            fresh = self._gens["gauss"].standard_normal((rows, self.n_particles))
            self._gbuf = np.vstack([self._gbuf[self._gbp:], fresh])
            self._gbp = 0
        g = self._gbuf[self._gbp:self._gbp + k]
        self._gbp += k
        self.gaussians_drawn += g.size
        if self.mirror:
            g = -g[:, ::-1]
        return g

    def uniforms(self, k: int) -> np.ndarray:
        """Bridge-crossing uniforms, one per piece and rank."""
        return self._gens["bridge"].random((k, self.n_particles))

    @property
    def brw(self) -> np.random.Generator:
        """Generator for the discrete-generation bounding processes."""
        return self._gens["brw"]


def make_driver_bundle(seed: int, n_particles: int, replica: int = 0,
                       mirror: bool = False) -> DriverBundle:
    return DriverBundle(seed, n_particles, replica=replica, mirror=mirror)
