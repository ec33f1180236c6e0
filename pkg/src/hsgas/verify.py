"""Built-in correctness battery with fixed seeds.

Seven checks cover the load-bearing guarantees: exact conservation and
separation bookkeeping over a long run, time reversibility of a short
trajectory, relaxation to the Maxwell speed law, the dilute collision-rate
prediction, agreement of the two independent contact-density routes, and the
vanishing of the collision integral on its own stationary density.

Every check uses a hard-coded seed, so the battery is deterministic: the
machine-readable result payload is byte-identical across reruns on one
platform.  Timing never enters the payload.  `fault=True` flips the sign of
the pair impulse inside the engine, which must make the conservation check
fail; it exists to prove the monitors are live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import dynamics, estimators, stats
from ._version import __version__
from .core import DomainSpec, SimulationError, make_params
from .dynamics import Engine
from .ensemble import (EnsembleSpec, POSITION_STREAM, VELOCITY_STREAM,
                       initial_state, replica_rng, run_ensemble)
from .estimators import EstimatorConfig, collector_factory

CHECK_NAMES = (
    "conservation",
    "admissibility",
    "reversibility",
    "equilibrium",
    "dilute_rate",
    "contact_identity",
    "collision_null",
)

_SEED_CONSERVATION = 7001
_SEED_REVERSIBILITY = 7002
_SEED_EQUILIBRIUM = 7003
_SEED_DILUTE = 7004
_SEED_CONTACT = 7005
_SEED_COLLISION = 7006

PER_EVENT_DRIFT_TOL = 1e-12
CUMULATIVE_DRIFT_TOL = 1e-9
SEPARATION_TOL = -1e-9
REVERSAL_TOL = 1e-6
KS_P_MIN = 0.01
RATE_RTOL = 0.05
CONTACT_Z_MAX = 3.0
NULL_SIGMAS = 3.0


def diameter_for_packing(eta_bar: float, n: int, volume: float) -> float:
    """Diameter giving the requested collision-sphere packing fraction."""
    return (3.0 * volume * eta_bar / (4.0 * math.pi * n)) ** (1.0 / 3.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: dict
    thresholds: dict
    error: str | None = None

    def payload(self) -> dict:
        out = {
            "name": self.name,
            "passed": bool(self.passed),
            "observed": self.observed,
            "thresholds": self.thresholds,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class BatteryResult:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def payload(self) -> dict:
        return {
            "format": "hsgas-verify-1",
            "code_version": __version__,
            "passed": self.passed,
            "checks": [c.payload() for c in self.checks],
        }


def _fresh_state(params, domain, seed):
    rv = replica_rng(seed, 0, VELOCITY_STREAM)
    rp = replica_rng(seed, 0, POSITION_STREAM)
    return initial_state(params, domain, rv, rp)


def _run_conservation(fault: bool = False) -> list[CheckResult]:
    domain = DomainSpec.from_volume(1.0)
    n = 216
    d = diameter_for_packing(0.05, n, domain.volume)
    params = make_params(n, d=d, domain=domain)
    state = _fresh_state(params, domain, _SEED_CONSERVATION)
    engine = Engine(state, params, domain, log_events=False)
    target_events = 100_000
    old_flag = dynamics._FAULT_SIGN_FLIP
    dynamics._FAULT_SIGN_FLIP = fault
    error = None
    # the injected fault pumps energy without bound, so overflow warnings are
    # expected on that path and silenced
    err_kw = {"over": "ignore", "invalid": "ignore"} if fault else {}
    try:
        with np.errstate(**err_kw):
            engine.advance_to(1e9, max_events=target_events)
    except SimulationError as exc:
        error = f"{type(exc).__name__}: {exc}"
    finally:
        dynamics._FAULT_SIGN_FLIP = old_flag
    diag = engine.diag
    per_event = max(diag.max_energy_drift_rel, diag.max_wall_energy_drift_rel,
                    diag.max_momentum_drift_rel)
    conservation = CheckResult(
        name="conservation",
        passed=(error is None and diag.events >= target_events
                and per_event <= PER_EVENT_DRIFT_TOL
                and diag.cumulative_energy_drift_rel <= CUMULATIVE_DRIFT_TOL),
        observed={
            "events": diag.events,
            "max_energy_drift_rel": diag.max_energy_drift_rel,
            "max_wall_energy_drift_rel": diag.max_wall_energy_drift_rel,
            "max_momentum_drift_rel": diag.max_momentum_drift_rel,
            "cumulative_energy_drift_rel": diag.cumulative_energy_drift_rel,
        },
        thresholds={
            "min_events": target_events,
            "per_event_drift": PER_EVENT_DRIFT_TOL,
            "cumulative_drift": CUMULATIVE_DRIFT_TOL,
        },
        error=error,
    )
    admissibility = CheckResult(
        name="admissibility",
        passed=(error is None
                and diag.min_gap_over_d >= SEPARATION_TOL
                and diag.min_wall_clearance_over_d >= SEPARATION_TOL),
        observed={
            "min_gap_over_d": diag.min_gap_over_d,
            "min_wall_clearance_over_d": diag.min_wall_clearance_over_d,
        },
        thresholds={"min_relative_separation": SEPARATION_TOL},
        error=error,
    )
    return [conservation, admissibility]


def _run_reversibility() -> list[CheckResult]:
    domain = DomainSpec.from_volume(1.0)
    n = 27
    d = diameter_for_packing(0.05, n, domain.volume)
    params = make_params(n, d=d, domain=domain)
    state0 = _fresh_state(params, domain, _SEED_REVERSIBILITY)
    n_events = 50

    engine = Engine(state0, params, domain, log_events=False)
    engine.advance_to(1e9, max_events=n_events)
    t_stop = engine.time + 1e-6  # drift a hair past the last event
    engine.advance_to(t_stop)
    if engine.diag.events != n_events:
        return [CheckResult("reversibility", False,
                            {"events": engine.diag.events},
                            {"events": n_events},
                            error="an extra event landed inside the drift pad")]
    state_mid = engine.snapshot(t_stop)
    duration = t_stop - state0.time

    flipped = state_mid.copy()
    flipped.vel[:] = -flipped.vel
    flipped.time = 0.0
    back = Engine(flipped, params, domain, log_events=False)
    back.advance_to(duration)
    state_back = back.snapshot(duration)

    pos_err = float(np.max(np.abs(state_back.pos - state0.pos)))
    vel_err = float(np.max(np.abs(-state_back.vel - state0.vel)))
    return [CheckResult(
        name="reversibility",
        passed=(pos_err <= REVERSAL_TOL and back.diag.events == n_events),
        observed={
            "position_error": pos_err,
            "velocity_error": vel_err,
            "forward_events": n_events,
            "backward_events": back.diag.events,
        },
        thresholds={"position_error": REVERSAL_TOL},
    )]


def _run_equilibrium() -> list[CheckResult]:
    domain = DomainSpec.from_volume(1.0)
    n = 500
    d = diameter_for_packing(0.05, n, domain.volume)
    params = make_params(n, d=d, domain=domain)
    state0 = _fresh_state(params, domain, _SEED_EQUILIBRIUM)
    horizon = 10.0 * params.mean_collision_time
    engine = Engine(state0, params, domain, log_events=False)
    engine.advance_to(horizon)
    state1 = engine.snapshot(horizon)
    speeds0 = np.linalg.norm(state0.vel, axis=1)
    speeds1 = np.linalg.norm(state1.vel, axis=1)
    ks = sps.ks_2samp(speeds0, speeds1)
    return [CheckResult(
        name="equilibrium",
        passed=bool(ks.pvalue > KS_P_MIN),
        observed={
            "ks_statistic": float(ks.statistic),
            "p_value": float(ks.pvalue),
            "events": engine.diag.events,
            "horizon_collision_times": 10.0,
        },
        thresholds={"p_min": KS_P_MIN},
    )]


def _run_dilute_rate() -> list[CheckResult]:
    domain = DomainSpec.from_volume(1.0)
    n = 8000
    d = diameter_for_packing(0.005, n, domain.volume)
    params = make_params(n, d=d, domain=domain)
    state = _fresh_state(params, domain, _SEED_DILUTE)
    tau = params.mean_collision_time
    burn, horizon = 0.3 * tau, 2.6 * tau
    warm = Engine(state, params, domain, log_events=False)
    warm.advance_to(burn)
    engine = Engine(warm.snapshot(burn), params, domain, log_events=False)
    engine.advance_to(burn + horizon)
    rate = 2.0 * engine.diag.events_pair / (n * horizon)
    predicted = params.collision_rate_estimate
    rel = abs(rate - predicted) / predicted
    return [CheckResult(
        name="dilute_rate",
        passed=bool(rel <= RATE_RTOL),
        observed={
            "rate": float(rate),
            "predicted": float(predicted),
            "relative_error": float(rel),
            "pair_events": engine.diag.events_pair,
            "eta_bar": params.eta_bar,
        },
        thresholds={"relative_error": RATE_RTOL},
    )]


def _run_contact_identity(workers: int = 1) -> list[CheckResult]:
    domain = DomainSpec.from_volume(1.0)
    n = 500
    d = diameter_for_packing(0.02, n, domain.volume)
    params = make_params(n, d=d, domain=domain)
    tau = params.mean_collision_time
    spec = EnsembleSpec(
        params=params,
        domain=domain,
        replicas=24,
        base_seed=_SEED_CONTACT,
        horizon=3.0 * tau,
        burn_in=1.0 * tau,
        n_samples=24,
    )
    config = EstimatorConfig(collect_time_resolved=False,
                             collect_speed_samples=False)
    result = run_ensemble(spec, collector_factory(config), workers=workers)
    rng = np.random.default_rng(_SEED_CONTACT)
    contact = estimators.contact_statistics(result.partials, params, domain,
                                            config, rng=rng)
    n_valid = int(np.sum(contact.valid))
    return [CheckResult(
        name="contact_identity",
        passed=bool(n_valid >= 4 and contact.max_abs_z <= CONTACT_Z_MAX),
        observed={
            "max_abs_z": contact.max_abs_z,
            "valid_bins": n_valid,
            "shell_counts": float(np.sum(contact.bin_counts)),
            "eta_bar": params.eta_bar,
        },
        thresholds={"max_abs_z": CONTACT_Z_MAX, "min_valid_bins": 4},
    )]


def _run_collision_null() -> list[CheckResult]:
    domain = DomainSpec.from_volume(1.0)
    n = 500
    d = diameter_for_packing(0.02, n, domain.volume)
    params = make_params(n, d=d, domain=domain)
    T = params.T
    n_probe = 8
    speeds = np.array([stats.maxwell_speed_quantile((k + 0.5) / n_probe, T)
                       for k in range(n_probe)])
    velocities = np.column_stack([speeds, np.zeros_like(speeds), np.zeros_like(speeds)])
    f = estimators.maxwellian_velocity_density(T)
    rng = np.random.default_rng(_SEED_COLLISION)
    q, sig = estimators.boltzmann_collision_integral(
        f, params, velocities, n_samples=200_000, rng=rng)
    floor = 1e-12 * params.N * params.d**2
    z = np.abs(q) / (sig + floor / NULL_SIGMAS)
    return [CheckResult(
        name="collision_null",
        passed=bool(len(q) >= 8 and np.all(np.abs(q) <= NULL_SIGMAS * sig + floor)),
        observed={
            "probe_speeds": [float(s) for s in speeds],
            "values": [float(v) for v in q],
            "sigmas": [float(s) for s in sig],
            "max_abs_z": float(np.max(z)),
        },
        thresholds={"sigmas": NULL_SIGMAS, "abs_floor": floor, "min_probes": 8},
    )]


def run_battery(workers: int = 1, fault: bool = False,
                checks=None, progress=None) -> BatteryResult:
    """Run the requested checks (all by default) and collect the results.

    `progress(name, result)` is called as each check finishes, so a caller
    can report timing without it entering the payload."""
    wanted = set(CHECK_NAMES if checks is None else checks)
    unknown = wanted - set(CHECK_NAMES)
    if unknown:
        raise ValueError(f"unknown check names: {sorted(unknown)}; "
                         f"available: {list(CHECK_NAMES)}")
    groups = [
        (("conservation", "admissibility"), lambda: _run_conservation(fault)),
        (("reversibility",), _run_reversibility),
        (("equilibrium",), _run_equilibrium),
        (("dilute_rate",), _run_dilute_rate),
        (("contact_identity",), lambda: _run_contact_identity(workers)),
        (("collision_null",), _run_collision_null),
    ]
    battery = BatteryResult()
    for names, runner in groups:
        if not wanted.intersection(names):
            continue
        try:
            results = runner()
        except SimulationError as exc:
            results = [CheckResult(name, False, {}, {},
                                   error=f"{type(exc).__name__}: {exc}")
                       for name in names]
        for res in results:
            if res.name in wanted:
                battery.checks.append(res)
                if progress is not None:
                    progress(res.name, res)
    return battery
