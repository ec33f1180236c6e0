"""Ensemble construction and replica execution.

Replica r of a run with base seed s draws its randomness from
numpy.random.SeedSequence(s, spawn_key=(r, k)) with stream k = 0 for
velocities, 1 for positions, 2 for estimator-internal sampling.  This is a
splittable counter-based construction: replicas can run in any order or in
parallel and still produce identical results, and partial results are always
merged in replica-index order.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import DomainSpec, ModelParams, SimulationError, SystemState, is_admissible
from .dynamics import Engine

VELOCITY_STREAM = 0
POSITION_STREAM = 1
ESTIMATOR_STREAM = 2


class SamplingError(SimulationError):
    """Rejection sampling could not place all particles."""


def replica_rng(base_seed: int, replica: int, stream: int) -> np.random.Generator:
    """Deterministic per-replica, per-stream generator (see module docstring)."""
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(replica, stream)))


def sample_maxwellian_velocities(n: int, T: float, rng: np.random.Generator) -> np.ndarray:
    """(n, 3) velocities, each component an independent N(0, T) draw."""
    return rng.normal(0.0, np.sqrt(T), size=(n, 3))


def sample_admissible_positions(
    params: ModelParams,
    domain: DomainSpec,
    rng: np.random.Generator,
    retry_cap: int = 500,
    max_restarts: int = 20,
) -> np.ndarray:
    """Sequential-insertion rejection sampling of admissible centers.

    Each center is uniform over the ball |r| <= R_o - d/2 conditioned on
    keeping distance >= d from the centers already placed.  A particle that
    exhausts `retry_cap` proposals restarts the whole configuration; after
    `max_restarts` restarts a SamplingError is raised.
    """
    n, d = params.N, params.d
    rc = domain.center_radius(d)
    d2 = d * d
    for _restart in range(max_restarts + 1):
        pos = np.empty((n, 3))
        placed = 0
        failed = False
        while placed < n:
            ok = False
            for _try in range(retry_cap):
                u = rng.normal(size=3)
                u /= np.sqrt(u @ u)
                x = u * (rc * rng.random() ** (1.0 / 3.0))
                if placed:
                    diff = pos[:placed] - x
                    if np.min(np.einsum("ij,ij->i", diff, diff)) < d2:
                        continue
                pos[placed] = x
                placed += 1
                ok = True
                break
            if not ok:
                failed = True
                break
        if not failed:
            return pos
    raise SamplingError(
        f"could not place {n} spheres of diameter {d:.6g} (eta={params.eta_bar:.4g}) "
        f"after {max_restarts} restarts with retry_cap={retry_cap}"
    )


def initial_state(
    params: ModelParams,
    domain: DomainSpec,
    rng_vel: np.random.Generator,
    rng_pos: np.random.Generator,
    retry_cap: int = 500,
    max_restarts: int = 20,
) -> SystemState:
    pos = sample_admissible_positions(params, domain, rng_pos, retry_cap, max_restarts)
    vel = sample_maxwellian_velocities(params.N, params.T, rng_vel)
    state = SystemState(pos, vel)
    assert is_admissible(state, params, domain), "sampled state must be admissible"
    return state


@dataclass(frozen=True)
class EnsembleSpec:
    """Plan for one ensemble: geometry, replica count, seeds, time windows.

    `burn_in` time units of event-driven evolution run before the measurement
    clock starts; burn-in relaxes the sequential-insertion position ensemble
    toward equilibrium and is the default correction for its small bias.
    `n_samples` snapshot times are spread uniformly over [0, horizon] of the
    measurement window (endpoints included).
    """

    params: ModelParams
    domain: DomainSpec
    replicas: int
    base_seed: int
    horizon: float
    burn_in: float = 0.0
    n_samples: int = 0
    mode: str = "auto"
    interactions: bool = True
    retry_cap: int = 500
    max_restarts: int = 20

    def sample_times(self) -> np.ndarray:
        if self.n_samples <= 0:
            return np.empty(0)
        if self.n_samples == 1:
            return np.array([self.burn_in])
        return self.burn_in + np.linspace(0.0, self.horizon, self.n_samples)


@dataclass
class ReplicaResult:
    """Summary of one replica: event counts, measured rate, engine monitors."""

    index: int
    events_pair: int
    events_wall: int
    collision_rate: float
    max_momentum_drift_rel: float
    max_energy_drift_rel: float
    max_wall_energy_drift_rel: float
    cumulative_energy_drift_rel: float
    min_gap_over_d: float
    min_wall_clearance_over_d: float


@dataclass
class EnsembleResult:
    spec: EnsembleSpec
    replicas: list[ReplicaResult]
    partials: list[dict]
    manifest: dict = field(default_factory=dict)


def run_replica(spec: EnsembleSpec, index: int, make_collector) -> tuple[ReplicaResult, dict]:
    """Run one replica start to finish and return (summary, estimator partial)."""
    params, domain = spec.params, spec.domain
    state = initial_state(
        params,
        domain,
        replica_rng(spec.base_seed, index, VELOCITY_STREAM),
        replica_rng(spec.base_seed, index, POSITION_STREAM),
        spec.retry_cap,
        spec.max_restarts,
    )
    collector = make_collector(
        params, domain, replica_rng(spec.base_seed, index, ESTIMATOR_STREAM)
    )
    engine = Engine(state, params, domain, mode=spec.mode, log_events=False,
                    interactions=spec.interactions)
    if spec.burn_in > 0.0:
        engine.advance_to(spec.burn_in)
    pair0, wall0 = engine.diag.events_pair, engine.diag.events_wall
    t_end = spec.burn_in + spec.horizon
    collector.begin(engine.snapshot(spec.burn_in), t_offset=spec.burn_in)
    engine.advance_to(t_end, observers=(collector,), sample_times=spec.sample_times())
    diag = engine.diag
    pairs = diag.events_pair - pair0
    result = ReplicaResult(
        index=index,
        events_pair=pairs,
        events_wall=diag.events_wall - wall0,
        collision_rate=2.0 * pairs / (params.N * spec.horizon),
        max_momentum_drift_rel=diag.max_momentum_drift_rel,
        max_energy_drift_rel=diag.max_energy_drift_rel,
        max_wall_energy_drift_rel=diag.max_wall_energy_drift_rel,
        cumulative_energy_drift_rel=diag.cumulative_energy_drift_rel,
        min_gap_over_d=diag.min_gap_over_d,
        min_wall_clearance_over_d=diag.min_wall_clearance_over_d,
    )
    return result, collector.partial(spec.horizon)


def _worker(args):
    spec, index, make_collector = args
    return index, run_replica(spec, index, make_collector)


def run_ensemble(spec: EnsembleSpec, make_collector, workers: int = 1) -> EnsembleResult:
    """Run all replicas and gather partials in replica-index order.

    Any replica failure aborts the whole run.  With workers > 1 the replicas
    run in separate processes; results are identical to a serial run because
    seeds and merge order do not depend on scheduling.
    """
    out: dict[int, tuple[ReplicaResult, dict]] = {}
    if workers > 1 and spec.replicas > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for index, payload in pool.map(
                _worker, [(spec, r, make_collector) for r in range(spec.replicas)]
            ):
                out[index] = payload
    else:
        for r in range(spec.replicas):
            out[r] = run_replica(spec, r, make_collector)
    replicas = [out[r][0] for r in range(spec.replicas)]
    partials = [out[r][1] for r in range(spec.replicas)]
    manifest = {
        "base_seed": spec.base_seed,
        "seed_derivation": "SeedSequence(base_seed, spawn_key=(replica, stream)); "
        "streams: 0=velocities 1=positions 2=estimators",
        "replicas": spec.replicas,
        "N": spec.params.N,
        "d": spec.params.d,
        "c": spec.params.c,
        "T": spec.params.T,
        "container_radius": spec.domain.radius,
        "burn_in": spec.burn_in,
        "horizon": spec.horizon,
        "n_samples": spec.n_samples,
        "engine_mode": spec.mode,
        "interactions": spec.interactions,
        "events_pair": [r.events_pair for r in replicas],
        "events_wall": [r.events_wall for r in replicas],
    }
    return EnsembleResult(spec=spec, replicas=replicas, partials=partials, manifest=manifest)
