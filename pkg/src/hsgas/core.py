"""Shared types for the hard-sphere gas: model parameters, domain, system state.

Conventions used throughout the package:

* all particles share one diameter d and unit mass m = 1
* the container is a sphere of radius R_o centered at the origin; a particle
  center is wall-admissible iff |r| <= R_o - d/2
* a pair (i, j) is admissible iff |r_i - r_j| >= d (contact included)
* scaled-diameter construction: d = c / sqrt(N), so N d^2 = c^2 exactly
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class SimulationError(Exception):
    """Base class for errors raised by this package."""


class PackingError(SimulationError):
    """Requested packing fraction is at or above the configured cap."""


class DomainError(SimulationError):
    """Sphere diameter is incompatible with the container geometry."""


@dataclass(frozen=True)
class DomainSpec:
    """Spherical container of radius `radius` centered at the origin."""

    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise DomainError(f"container radius must be positive, got {self.radius}")

    @classmethod
    def from_volume(cls, volume: float) -> "DomainSpec":
        if not (volume > 0 and math.isfinite(volume)):
            raise DomainError(f"container volume must be positive, got {volume}")
        return cls((3.0 * volume / (4.0 * math.pi)) ** (1.0 / 3.0))

    @property
    def volume(self) -> float:
        return 4.0 * math.pi * self.radius**3 / 3.0

    def center_radius(self, d: float) -> float:
        """Largest admissible center distance from the origin for diameter d."""
        return self.radius - 0.5 * d


@dataclass(frozen=True)
class ModelParams:
    """Frozen per-run physical parameters and derived diagnostics.

    Exactly one of the scale constant c or the diameter d is given at
    construction time (use `make_params`); the other is derived via
    d = c / sqrt(N).  k1 = N d^2 / V and k2 = m N / V are the invariants held
    fixed (k1) or reported (k2) along a diameter-scaling sweep.
    """

    N: int
    c: float
    d: float
    T: float
    m: float
    volume: float
    epsilon: float
    k1: float
    k2: float
    eta_bar: float
    packing_cap: float

    @property
    def number_density(self) -> float:
        return self.N / self.volume

    @property
    def mean_speed(self) -> float:
        # mean speed of a Maxwellian with per-component variance T
        return math.sqrt(8.0 * self.T / math.pi)

    @property
    def collision_rate_estimate(self) -> float:
        """Dilute-gas per-particle collision rate sqrt(2) pi n d^2 vbar."""
        return math.sqrt(2.0) * math.pi * self.number_density * self.d**2 * self.mean_speed

    @property
    def mean_collision_time(self) -> float:
        return 1.0 / self.collision_rate_estimate


def make_params(
    N: int,
    c: float | None = None,
    domain: DomainSpec | None = None,
    T: float = 1.0,
    *,
    d: float | None = None,
    packing_cap: float = 0.25,
    m: float = 1.0,
) -> ModelParams:
    """Build ModelParams from either the scale constant c or a direct diameter d.

    Raises PackingError if the packing fraction reaches `packing_cap` and
    DomainError if the diameter does not fit the container.
    """
    if domain is None:
        raise DomainError("a DomainSpec is required")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if (c is None) == (d is None):
        raise ValueError("give exactly one of c or d")
    if not (T > 0):
        raise ValueError(f"temperature must be positive, got {T}")
    if c is not None:
        if not (c > 0):
            raise ValueError(f"c must be positive, got {c}")
        d = c / math.sqrt(N)
    else:
        if not (d > 0):
            raise ValueError(f"d must be positive, got {d}")
        c = d * math.sqrt(N)
    if d >= domain.radius:
        raise DomainError(
            f"diameter d={d:.6g} does not fit container radius {domain.radius:.6g}"
        )
    volume = domain.volume
    eta_bar = 4.0 * math.pi * N * d**3 / (3.0 * volume)
    if eta_bar >= packing_cap:
        raise PackingError(
            f"packing fraction {eta_bar:.6g} >= cap {packing_cap:.6g} (N={N}, d={d:.6g})"
        )
    return ModelParams(
        N=N,
        c=c,
        d=d,
        T=T,
        m=m,
        volume=volume,
        epsilon=1.0 / N,
        k1=N * d**2 / volume,
        k2=m * N / volume,
        eta_bar=eta_bar,
        packing_cap=packing_cap,
    )


@dataclass(frozen=True)
class ParticleState:
    """Position and velocity of one particle. Arrays are treated as immutable."""

    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))


@dataclass
class SystemState:
    """Positions and velocities of N particles at a common time.

    `collision_count[i]` counts how many collision events (pair or wall)
    particle i has undergone; the event engine uses it to invalidate stale
    scheduled events.
    """

    pos: np.ndarray
    vel: np.ndarray
    time: float = 0.0
    collision_count: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.pos = np.ascontiguousarray(self.pos, dtype=float)
        self.vel = np.ascontiguousarray(self.vel, dtype=float)
        if self.pos.ndim != 2 or self.pos.shape[1] != 3 or self.pos.shape != self.vel.shape:
            raise ValueError(f"pos/vel must both be (N, 3), got {self.pos.shape} / {self.vel.shape}")
        if not (np.isfinite(self.pos).all() and np.isfinite(self.vel).all()):
            raise ValueError("positions and velocities must be finite")
        if self.collision_count is None:
            self.collision_count = np.zeros(len(self.pos), dtype=np.int64)
        else:
            self.collision_count = np.asarray(self.collision_count, dtype=np.int64).copy()

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    def particle(self, i: int) -> ParticleState:
        return ParticleState(self.pos[i].copy(), self.vel[i].copy())

    def copy(self) -> "SystemState":
        return SystemState(self.pos.copy(), self.vel.copy(), self.time, self.collision_count)

    def kinetic_energy(self, m: float = 1.0) -> float:
        return 0.5 * m * float(np.sum(self.vel * self.vel))

    def momentum(self, m: float = 1.0) -> np.ndarray:
        return m * self.vel.sum(axis=0)


def pair_gap(state: SystemState, i: int, j: int, params: ModelParams) -> float:
    """Surface gap |r_i - r_j| - d; negative means overlap."""
    if i == j:
        raise IndexError("pair_gap needs two distinct indices")
    r12 = state.pos[i] - state.pos[j]
    return float(np.sqrt(np.dot(r12, r12))) - params.d


def min_pair_gap(state: SystemState, params: ModelParams, block: int = 512) -> float:
    """Minimum surface gap over all pairs (O(N^2), blocked to bound memory)."""
    n = state.n
    if n < 2:
        return math.inf
    best = math.inf
    p = state.pos
    for a in range(0, n, block):
        hi = min(a + block, n)
        # distances from rows [a:hi) to all later rows
        diff = p[a:hi, None, :] - p[None, a:, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        rows = hi - a
        mask = np.arange(a, n)[None, :] > np.arange(a, hi)[:, None]
        if mask.any():
            best = min(best, float(np.sqrt(d2[mask].min())))
        del diff, d2, mask, rows
    return best - params.d


def wall_clearance(state: SystemState, params: ModelParams, domain: DomainSpec) -> float:
    """Minimum of (R_o - d/2) - |r_i| over particles; negative means a center
    sits outside the admissible region."""
    radii = np.sqrt(np.einsum("ij,ij->i", state.pos, state.pos))
    return float(domain.center_radius(params.d) - radii.max())


def is_admissible(state: SystemState, params: ModelParams, domain: DomainSpec) -> bool:
    """True iff every pair is at gap >= 0 and every center is inside the
    wall-admissible ball (both bounds inclusive)."""
    if wall_clearance(state, params, domain) < 0.0:
        return False
    if state.n >= 2 and min_pair_gap(state, params) < 0.0:
        return False
    return True


def occupation_indicator(
    point: np.ndarray,
    state: SystemState,
    params: ModelParams,
    domain: DomainSpec,
    exclude: int | None = None,
) -> int:
    """Occupation of a spatial point under the strong step convention.

    Returns 1 iff the point is strictly farther than d from every particle
    center (optionally excluding one index) and strictly farther than d/2 from
    the wall surface.  A distance of exactly d (or exactly d/2 to the wall)
    gives 0: the step function fires at zero argument.
    """
    point = np.asarray(point, dtype=float).reshape(3)
    wall_dist = domain.radius - math.sqrt(float(np.dot(point, point)))
    if 0.5 * params.d - wall_dist >= 0.0:
        return 0
    pos = state.pos
    if exclude is not None:
        keep = np.ones(state.n, dtype=bool)
        keep[exclude] = False
        pos = pos[keep]
    if len(pos):
        diff = pos - point[None, :]
        d2 = np.einsum("ij,ij->i", diff, diff)
        if float(params.d**2 - d2.min()) >= 0.0:
            return 0
    return 1
