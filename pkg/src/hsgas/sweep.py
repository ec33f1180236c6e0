"""Diameter-scaling sweep over a particle-number ladder.

The plan holds N d^2 fixed by setting d = c / sqrt(N) while N climbs a
ladder, runs an independent equilibrium ensemble at each rung with one shared
velocity binning, and condenses each rung into a checkpointable record:
collision rates against the dilute prediction, the collision-sphere
correction term (flux route) with its majorization constant, the distant-pair
factorization defect, the transport-balance residual, a Monte Carlo
collision-integral magnitude evaluated on the measured density, and
nested-ball occupancy ratios.

Records are written after every rung, so `execute_sweep` with `resume=True`
picks an interrupted sweep up where it stopped; a fingerprint of the plan is
stored in each record and rechecked on load so checkpoints from a different
plan are rejected instead of silently mixed in.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import estimators, persist, stats
from .core import DomainSpec, ModelParams, SimulationError, make_params
from .ensemble import EnsembleSpec, run_ensemble
from .estimators import EstimatorConfig, collector_factory
from .persist import CheckpointError


class PlanError(SimulationError):
    """Sweep plan that cannot be run as stated."""


class FitError(SimulationError):
    """Power-law fit rejected: too few points or nonpositive values."""


_EVENTS_PER_SECOND = 6000.0  # rough single-core throughput for runtime hints
FLUX_MIN_COUNTS = 25         # collision participations a speed bin needs


@dataclass(frozen=True)
class SweepPlan:
    """Immutable description of a diameter-scaling sweep.

    Time scales are expressed in units of the dilute mean collision time of
    each rung, so every rung sees the same number of collisions per particle.
    The replica count per rung defaults to max(min_replicas, budget // N),
    keeping the total particle-time roughly constant along the ladder.
    """

    c: float
    n_values: tuple[int, ...]
    domain: DomainSpec
    T: float = 1.0
    base_seed: int = 0
    burn_in_mct: float = 1.0
    horizon_mct: float = 3.0
    n_samples: int = 20
    replica_budget: int = 24_000
    min_replicas: int = 8
    estimator_config: EstimatorConfig = field(default_factory=EstimatorConfig)
    engine_mode: str = "auto"
    interactions: bool = True
    packing_cap: float = 0.25
    mc_samples: int = 40_000
    n_probe_speeds: int = 8
    n_boot: int = 300
    workers: int = 1

    def replicas_for(self, n: int) -> int:
        return max(self.min_replicas, self.replica_budget // n)

    def params_for(self, n: int) -> ModelParams:
        return make_params(n, c=self.c, domain=self.domain, T=self.T,
                           packing_cap=self.packing_cap)


def plan_to_dict(plan: SweepPlan) -> dict:
    d = dataclasses.asdict(plan)
    d["n_values"] = list(plan.n_values)
    d["domain"] = {"radius": plan.domain.radius}
    return d


def plan_fingerprint(plan: SweepPlan) -> str:
    return persist.config_hash(plan_to_dict(plan))


def rung_seed(base_seed: int, n: int) -> int:
    ss = np.random.SeedSequence(base_seed, spawn_key=(n,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def validate_plan(plan: SweepPlan) -> list[dict]:
    """Check a plan before spending compute on it.

    Returns one summary row per rung (diameter, packing fraction, replica
    count, rough event and runtime predictions).  Raises PlanError on an
    empty or unsorted ladder, a broken d = c / sqrt(N) relation, packing
    fractions that fail to decrease along the ladder, or a first rung already
    over the packing cap.
    """
    if len(plan.n_values) == 0:
        raise PlanError("plan has no rungs")
    ns = list(plan.n_values)
    if any(int(n) != n or n < 2 for n in ns):
        raise PlanError(f"particle counts must be integers >= 2, got {ns}")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise PlanError(f"particle counts must be strictly increasing, got {ns}")
    if not (plan.c > 0.0):
        raise PlanError(f"scaling constant must be positive, got {plan.c}")
    if plan.n_samples < 0 or plan.horizon_mct <= 0 or plan.burn_in_mct < 0:
        raise PlanError("horizon must be positive and burn-in and sample "
                        "counts nonnegative")

    rows = []
    prev_eta = math.inf
    for n in ns:
        try:
            params = plan.params_for(n)
        except SimulationError as exc:
            raise PlanError(f"rung N={n} is not runnable: {exc}") from exc
        if not math.isclose(n * params.d**2, plan.c**2, rel_tol=1e-12, abs_tol=0.0):
            raise PlanError(
                f"rung N={n}: N d^2 = {n * params.d**2!r} drifted from "
                f"c^2 = {plan.c**2!r}")
        if not params.eta_bar < prev_eta:
            raise PlanError(
                f"rung N={n}: packing fraction {params.eta_bar} does not "
                f"decrease along the ladder (previous {prev_eta})")
        prev_eta = params.eta_bar
        replicas = plan.replicas_for(n)
        span = plan.burn_in_mct + plan.horizon_mct
        events = replicas * n * span / 2.0
        rows.append({
            "n": n,
            "d": params.d,
            "eta_bar": params.eta_bar,
            "replicas": replicas,
            "rate_dilute": params.collision_rate_estimate,
            "predicted_events": events,
            "predicted_seconds": events / _EVENTS_PER_SECOND,
        })
    return rows


@dataclass
class SweepRecord:
    """Everything retained from one rung of the ladder."""

    n: int
    d: float
    c: float
    eta_bar: float
    replicas: int
    seed: int
    rate_mean: float
    rate_sem: float
    rate_dilute: float
    overlap_mass: float
    overlap_mass_sigma: float
    k_sup: float
    k_sup_sigma: float
    defect: float
    defect_sigma: float
    free_frac: float
    free_frac_sem: float
    residual_l2: float
    residual_l2_sigma: float
    residual_norm: float
    residual_raw_l1: float
    residual_scale: float
    collision_l2: float
    collision_l2_sigma: float
    collision_q_mean_abs: float
    collision_q_sigma: float
    contact_max_z: float
    max_local_eta: float
    field_flat_z: float
    min_gap_over_d: float
    min_wall_clearance_over_d: float
    max_energy_drift_rel: float
    max_momentum_drift_rel: float
    events_pair: int
    events_wall: int
    speed_edges: np.ndarray
    f1_bins: np.ndarray
    f1_bins_sigma: np.ndarray
    overlap_bins: np.ndarray
    overlap_bins_sigma: np.ndarray
    ratio_bins: np.ndarray
    probe_speeds: np.ndarray
    q_values: np.ndarray
    q_sigmas: np.ndarray
    vh_radii: np.ndarray
    vh_counts: np.ndarray
    vh_counts_sem: np.ndarray
    vh_volumes: np.ndarray
    vh_count_ratio: np.ndarray
    vh_density_ratio: np.ndarray
    vh_flagged: np.ndarray
    manifest: dict


_RECORD_ARRAY_FIELDS = (
    "speed_edges", "f1_bins", "f1_bins_sigma", "overlap_bins",
    "overlap_bins_sigma", "ratio_bins", "probe_speeds", "q_values",
    "q_sigmas", "vh_radii", "vh_counts", "vh_counts_sem", "vh_volumes",
    "vh_count_ratio", "vh_density_ratio", "vh_flagged",
)


def _record_to_payload(rec: SweepRecord) -> tuple[dict, dict]:
    meta = {}
    arrays = {}
    for f in dataclasses.fields(SweepRecord):
        value = getattr(rec, f.name)
        if f.name in _RECORD_ARRAY_FIELDS:
            arrays[f.name] = np.asarray(value)
        elif f.name == "manifest":
            meta["manifest"] = value
        elif isinstance(value, (int, np.integer)):
            meta[f.name] = int(value)
        else:
            meta[f.name] = float(value)
    return meta, arrays


def _record_from_payload(meta: dict, arrays: dict) -> SweepRecord:
    kwargs = {}
    for f in dataclasses.fields(SweepRecord):
        if f.name in _RECORD_ARRAY_FIELDS:
            kwargs[f.name] = arrays[f.name]
        else:
            kwargs[f.name] = meta[f.name]
    return SweepRecord(**kwargs)


def save_record(path, rec: SweepRecord, plan_hash: str) -> None:
    meta, arrays = _record_to_payload(rec)
    meta["plan_hash"] = plan_hash
    persist.save_checkpoint(path, meta, arrays)


def load_record(path, plan_hash: str | None = None) -> SweepRecord:
    meta, arrays = persist.load_checkpoint(path)
    if plan_hash is not None and meta.get("plan_hash") != plan_hash:
        raise CheckpointError(
            f"checkpoint {path} was produced by a different plan "
            f"(hash {meta.get('plan_hash')!r}, expected {plan_hash!r})")
    meta = {k: v for k, v in meta.items() if k != "plan_hash"}
    return _record_from_payload(meta, arrays)


def _analysis_rng(plan: SweepPlan, n: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(plan.base_seed,
                                                        spawn_key=(n, 0xA5)))


def _overlap_mass_statistic(m1_bar: np.ndarray, d: float, n_part: int):
    # sum_b V_ball(d) * flux_value_b * Vv_b * V_avail / N collapses to
    # (4 d / (3 N)) * sum_b counts_b / (time * m1_bar_b)
    factor = 4.0 * d / (3.0 * n_part)

    def statistic(tables):
        counts = np.sum([t["flux_counts"] for t in tables], axis=0)
        time = sum(t["meas_time"] for t in tables)
        return factor * np.sum(counts / (time * m1_bar))

    return statistic


def _ksup_statistic(vel_vols: np.ndarray, v_avail: float, d: float,
                    m1_bar: np.ndarray, params: ModelParams,
                    valid: np.ndarray):
    ball = 4.0 * math.pi / 3.0 * d**3
    scale = (params.N - 1) * d**3 / params.volume

    def statistic(tables):
        counts = np.sum([t["flux_counts"] for t in tables], axis=0)
        time = sum(t["meas_time"] for t in tables)
        flux_value = counts / (time * math.pi * d**2 * m1_bar * vel_vols * v_avail)
        mass = np.sum([t["f1_coarse"] / t["snapshots"] for t in tables], axis=0)
        mass /= len(tables)
        f1 = mass / (vel_vols * v_avail)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = (ball * flux_value / params.N) / (scale * f1)
        ratios = np.where(valid & (f1 > 0), ratios, np.nan)
        if not np.any(np.isfinite(ratios)):
            return math.nan
        return float(np.nanmax(ratios))

    return statistic


def run_sweep_point(plan: SweepPlan, n: int, workers: int | None = None) -> SweepRecord:
    """Run the full ensemble for one rung and condense it into a record."""
    params = plan.params_for(n)
    tau = params.mean_collision_time
    spec = EnsembleSpec(
        params=params,
        domain=plan.domain,
        replicas=plan.replicas_for(n),
        base_seed=rung_seed(plan.base_seed, n),
        horizon=plan.horizon_mct * tau,
        burn_in=plan.burn_in_mct * tau,
        n_samples=plan.n_samples,
        mode=plan.engine_mode,
        interactions=plan.interactions,
    )
    result = run_ensemble(spec, collector_factory(plan.estimator_config),
                          workers=plan.workers if workers is None else workers)
    return build_record(plan, params, result)


def build_record(plan: SweepPlan, params: ModelParams,
                 result) -> SweepRecord:
    """Condense an ensemble result into a sweep record (pure analysis)."""
    cfg = plan.estimator_config
    domain = plan.domain
    partials = result.partials
    rng = _analysis_rng(plan, params.N)
    d, T = params.d, params.T

    rates = np.array([r.collision_rate for r in result.replicas])
    rate_mean = float(rates.mean())
    rate_sem = float(rates.std(ddof=1) / math.sqrt(len(rates))) if len(rates) > 1 else math.inf

    contact = estimators.contact_statistics(partials, params, domain, cfg,
                                            rng=rng, n_boot=plan.n_boot)
    split = estimators.continuation_split(partials, contact, params, domain,
                                          cfg, on_empty="mask")
    vel_vols = 4.0 * math.pi / 3.0 * np.diff(contact.speed_edges**3)
    v_avail = domain.center_radius(d) ** 3 * 4.0 * math.pi / 3.0
    m1_bar = stats.binned_mean_relative_speed(contact.speed_edges, T)

    mass_stat = _overlap_mass_statistic(m1_bar, d, params.N)
    overlap_mass, overlap_mass_sigma = stats.bootstrap_over_replicas(
        partials, mass_stat, plan.n_boot, rng)
    # the flux route carries the sweep statistics; its own count threshold
    # decides which bins enter the majorization maximum (the shell route is
    # far thinner at sweep sizes and stays a cross-check elsewhere)
    flux_total = np.sum([p["flux_counts"] for p in partials], axis=0)
    valid_flux = flux_total >= FLUX_MIN_COUNTS
    ksup_stat = _ksup_statistic(vel_vols, v_avail, d, m1_bar, params, valid_flux)
    k_sup, k_sup_sigma = stats.bootstrap_over_replicas(
        partials, ksup_stat, plan.n_boot, rng)

    overlap_bins = split.overlap_flux * vel_vols * v_avail
    overlap_bins_sigma = split.overlap_flux_sigma * vel_vols * v_avail
    scale = (params.N - 1) * d**3 / params.volume
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_bins = (split.overlap_flux) / (scale * split.f1_density)
    ratio_bins = np.where(valid_flux & (split.f1_density > 0), ratio_bins, np.nan)

    defect = estimators.factorization_defect(partials, params, cfg, rng=rng,
                                             n_boot=plan.n_boot)
    free_mean, free_sem = estimators.free_fraction(partials)

    try:
        resid = estimators.free_streaming_residual(partials, cfg, params,
                                                   domain, rng=rng)
        residual_l2 = resid.l2_excess
        residual_l2_sigma = resid.l2_excess_sigma
        residual_norm = resid.norm
        residual_raw_l1 = resid.raw_l1
        residual_scale = resid.scale
        collision_l2 = resid.collision_l2_excess
        collision_l2_sigma = resid.collision_l2_excess_sigma
    except estimators.InsufficientSamplesError:
        residual_l2 = residual_l2_sigma = residual_norm = math.nan
        residual_raw_l1 = residual_scale = math.nan
        collision_l2 = collision_l2_sigma = math.nan

    edges_r = np.linspace(0.0, domain.radius, cfg.n_radial + 1)
    edges_s = np.linspace(0.0, cfg.speed_max_factor * math.sqrt(T), cfg.n_speed + 1)
    density = estimators.build_phase_density(partials, edges_r, edges_s,
                                             kind="radial_speed")
    f_meas = estimators.isotropic_speed_interpolant(density)
    probe_speeds = np.array([
        stats.maxwell_speed_quantile((k + 0.5) / plan.n_probe_speeds, T)
        for k in range(plan.n_probe_speeds)
    ])
    velocities = np.column_stack([probe_speeds, np.zeros_like(probe_speeds),
                                  np.zeros_like(probe_speeds)])
    q_values, q_sigmas = estimators.boltzmann_collision_integral(
        f_meas, params, velocities, n_samples=plan.mc_samples, rng=rng)

    profile = estimators.field_profile(partials, params, domain, cfg)
    interior_packing = profile.packing[profile.interior]
    max_local_eta = float(np.max(interior_packing)) if interior_packing.size else math.nan
    probe = estimators.nested_ball_probe(partials, params, domain, cfg)

    manifest = dict(result.manifest)
    manifest["plan_c"] = plan.c
    manifest["rung_seed"] = rung_seed(plan.base_seed, params.N)

    return SweepRecord(
        n=params.N,
        d=d,
        c=plan.c,
        eta_bar=params.eta_bar,
        replicas=len(result.replicas),
        seed=rung_seed(plan.base_seed, params.N),
        rate_mean=rate_mean,
        rate_sem=rate_sem,
        rate_dilute=params.collision_rate_estimate,
        overlap_mass=float(overlap_mass),
        overlap_mass_sigma=float(overlap_mass_sigma),
        k_sup=float(k_sup),
        k_sup_sigma=float(k_sup_sigma),
        defect=defect.value,
        defect_sigma=defect.sigma,
        free_frac=free_mean,
        free_frac_sem=free_sem,
        residual_l2=float(residual_l2),
        residual_l2_sigma=float(residual_l2_sigma),
        residual_norm=float(residual_norm),
        residual_raw_l1=float(residual_raw_l1),
        residual_scale=float(residual_scale),
        collision_l2=float(collision_l2),
        collision_l2_sigma=float(collision_l2_sigma),
        collision_q_mean_abs=float(np.mean(np.abs(q_values))),
        collision_q_sigma=float(np.mean(q_sigmas)),
        contact_max_z=contact.max_abs_z,
        max_local_eta=max_local_eta,
        field_flat_z=profile.flat_max_z,
        min_gap_over_d=float(min(r.min_gap_over_d for r in result.replicas)),
        min_wall_clearance_over_d=float(min(r.min_wall_clearance_over_d
                                            for r in result.replicas)),
        max_energy_drift_rel=float(max(r.max_energy_drift_rel
                                       for r in result.replicas)),
        max_momentum_drift_rel=float(max(r.max_momentum_drift_rel
                                         for r in result.replicas)),
        events_pair=int(sum(r.events_pair for r in result.replicas)),
        events_wall=int(sum(r.events_wall for r in result.replicas)),
        speed_edges=contact.speed_edges,
        f1_bins=split.f1_density,
        f1_bins_sigma=split.f1_sigma,
        overlap_bins=overlap_bins,
        overlap_bins_sigma=overlap_bins_sigma,
        ratio_bins=ratio_bins,
        probe_speeds=probe_speeds,
        q_values=q_values,
        q_sigmas=q_sigmas,
        vh_radii=probe.radii,
        vh_counts=probe.mean_counts,
        vh_counts_sem=probe.counts_sem,
        vh_volumes=probe.volumes,
        vh_count_ratio=probe.count_ratio,
        vh_density_ratio=probe.density_ratio,
        vh_flagged=probe.flagged.astype(np.uint8),
        manifest=manifest,
    )


@dataclass
class SweepResult:
    plan: SweepPlan
    records: list[SweepRecord]
    table: list[dict]
    fingerprint: str
    completed: bool = True


def record_path(out_dir, n: int) -> str:
    return os.path.join(out_dir, f"sweep_n{n:06d}.ckpt")


def execute_sweep(plan: SweepPlan, out_dir=None, workers: int | None = None,
                  resume: bool = True, stop_after: int | None = None,
                  should_stop=None, progress=None) -> SweepResult:
    """Run (or resume) a sweep, checkpointing after each rung.

    out_dir None keeps everything in memory.  `should_stop` is polled after
    each rung; returning True ends the sweep early with completed=False (the
    rungs finished so far are already on disk).  `progress` is called with
    each finished record.
    """
    table = validate_plan(plan)
    fingerprint = plan_fingerprint(plan)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    records: list[SweepRecord] = []
    completed = True
    for idx, n in enumerate(plan.n_values):
        if stop_after is not None and idx >= stop_after:
            completed = False
            break
        path = record_path(out_dir, n) if out_dir is not None else None
        if resume and path is not None and os.path.exists(path):
            rec = load_record(path, plan_hash=fingerprint)
        else:
            rec = run_sweep_point(plan, n, workers=workers)
            if path is not None:
                save_record(path, rec, fingerprint)
        records.append(rec)
        if progress is not None:
            progress(rec)
        if should_stop is not None and should_stop():
            completed = idx + 1 == len(plan.n_values)
            break

    return SweepResult(plan=plan, records=records, table=table,
                       fingerprint=fingerprint, completed=completed)


# ---------------------------------------------------------------------------
# fits and summary tables


@dataclass
class PowerLawFit:
    """Least-squares fit of value = amplitude * x**exponent on log-log axes,
    with a residual-bootstrap confidence interval for the exponent."""

    exponent: float
    amplitude: float
    sigma: float
    ci_low: float
    ci_high: float
    r_squared: float
    residual_rms: float
    n_points: int


def fit_power_law(x, y, n_boot: int = 1000,
                  rng: np.random.Generator | None = None) -> PowerLawFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError(f"need matching 1-d arrays, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise FitError(f"need at least 3 points for a power-law fit, got {len(x)}")
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)):
        raise FitError("points must be finite")
    if np.any(x <= 0) or np.any(y <= 0):
        raise FitError("log-log fit needs strictly positive values; "
                       f"offending y values: {y[y <= 0].tolist()}")
    lx, ly = np.log(x), np.log(y)

    def ols(ly_in):
        vx = lx - lx.mean()
        beta = float(np.dot(vx, ly_in - ly_in.mean()) / np.dot(vx, vx))
        alpha = float(ly_in.mean() - beta * lx.mean())
        return beta, alpha

    beta, alpha = ols(ly)
    fitted = alpha + beta * lx
    res = ly - fitted
    ss_res = float(np.dot(res, res))
    ss_tot = float(np.dot(ly - ly.mean(), ly - ly.mean()))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot

    if rng is None:
        rng = np.random.default_rng(0)
    betas = np.empty(n_boot)
    for b in range(n_boot):
        resampled = fitted + rng.choice(res, size=len(res), replace=True)
        betas[b], _ = ols(resampled)
    lo, hi = np.percentile(betas, [2.5, 97.5])

    return PowerLawFit(
        exponent=beta,
        amplitude=float(math.exp(alpha)),
        sigma=float(betas.std(ddof=1)),
        ci_low=float(lo),
        ci_high=float(hi),
        r_squared=float(r2),
        residual_rms=float(math.sqrt(ss_res / len(x))),
        n_points=len(x),
    )


def overlap_decay_fit(records: list[SweepRecord], n_boot: int = 1000,
                      rng: np.random.Generator | None = None) -> PowerLawFit:
    ns = [r.n for r in records]
    vals = [r.overlap_mass for r in records]
    return fit_power_law(ns, vals, n_boot=n_boot, rng=rng)


def rate_spread(records: list[SweepRecord]) -> float:
    rates = np.array([r.rate_mean for r in records])
    return float((rates.max() - rates.min()) / rates.mean())


def defect_monotone(records: list[SweepRecord], slack_sigmas: float = 2.0) -> bool:
    """Non-increasing factorization defect along the ladder, within errors."""
    for a, b in zip(records, records[1:]):
        budget = slack_sigmas * math.hypot(a.defect_sigma, b.defect_sigma)
        if b.defect > a.defect + budget:
            return False
    return True


def compare_terms(records: list[SweepRecord]) -> dict:
    """Machine-readable comparison of the three terms along the ladder.

    Per rung: the transport-balance residual with its zero-consistency
    verdict, the Monte Carlo collision-integral magnitude on the measured
    density, and the collision-sphere correction mass.  Appended: the
    power-law fit of the correction mass against N (or the reason the fit
    was rejected), the rate spread, and the defect monotonicity verdict.
    """
    def zero_consistent(l2, sigma):
        return bool(np.isfinite(l2) and np.isfinite(sigma)
                    and abs(l2) <= 3.0 * sigma)

    out = {
        "n": [r.n for r in records],
        "eta_bar": [r.eta_bar for r in records],
        "rate_mean": [r.rate_mean for r in records],
        "rate_sem": [r.rate_sem for r in records],
        "residual_l2": [r.residual_l2 for r in records],
        "residual_l2_sigma": [r.residual_l2_sigma for r in records],
        "residual_zero_consistent": [
            zero_consistent(r.residual_l2, r.residual_l2_sigma) for r in records],
        "collision_q_mean_abs": [r.collision_q_mean_abs for r in records],
        "collision_q_sigma": [r.collision_q_sigma for r in records],
        "overlap_mass": [r.overlap_mass for r in records],
        "overlap_mass_sigma": [r.overlap_mass_sigma for r in records],
        "k_sup": [r.k_sup for r in records],
        "k_sup_sigma": [r.k_sup_sigma for r in records],
        "defect": [r.defect for r in records],
        "defect_sigma": [r.defect_sigma for r in records],
        "free_fraction": [r.free_frac for r in records],
    }
    if records:
        out["rate_spread"] = rate_spread(records)
        out["defect_monotone"] = defect_monotone(records)
        finite_k = [r.k_sup for r in records if np.isfinite(r.k_sup) and r.k_sup > 0]
        if finite_k:
            out["k_sup_spread"] = float(max(finite_k) / min(finite_k))
        try:
            fit = overlap_decay_fit(records)
            out["overlap_fit"] = {
                "exponent": fit.exponent,
                "sigma": fit.sigma,
                "ci_low": fit.ci_low,
                "ci_high": fit.ci_high,
                "amplitude": fit.amplitude,
                "r_squared": fit.r_squared,
                "n_points": fit.n_points,
            }
        except FitError as exc:
            out["overlap_fit"] = {"error": str(exc)}
    return out


def records_columns(records: list[SweepRecord]) -> tuple[dict, dict]:
    """Scalar per-rung table as (meta, columns) ready for the CSV writer."""
    scalar_fields = [f.name for f in dataclasses.fields(SweepRecord)
                     if f.name not in _RECORD_ARRAY_FIELDS and f.name != "manifest"]
    columns = {name: [getattr(r, name) for r in records] for name in scalar_fields}
    meta = {"rows": len(records), "kind": "sweep_summary"}
    return meta, columns


def van_hove_columns(records: list[SweepRecord]) -> tuple[dict, dict]:
    """Nested-ball probe table, one row per (rung, radius)."""
    cols: dict[str, list] = {k: [] for k in (
        "n", "radius", "mean_count", "count_sem", "volume",
        "count_ratio", "density_ratio", "flagged")}
    for r in records:
        for k in range(len(r.vh_radii)):
            cols["n"].append(r.n)
            cols["radius"].append(float(r.vh_radii[k]))
            cols["mean_count"].append(float(r.vh_counts[k]))
            cols["count_sem"].append(float(r.vh_counts_sem[k]))
            cols["volume"].append(float(r.vh_volumes[k]))
            cols["count_ratio"].append(float(r.vh_count_ratio[k]))
            cols["density_ratio"].append(float(r.vh_density_ratio[k]))
            cols["flagged"].append(int(r.vh_flagged[k]))
    meta = {"rows": len(cols["n"]), "kind": "nested_ball_probe"}
    return meta, cols


def overlap_columns(records: list[SweepRecord]) -> tuple[dict, dict]:
    """Per-(rung, speed-bin) correction-term table for the CSV writer."""
    cols: dict[str, list] = {k: [] for k in (
        "n", "speed_lo", "speed_hi", "f1_density", "f1_sigma",
        "overlap_mass", "overlap_sigma", "ratio")}
    for r in records:
        for b in range(len(r.overlap_bins)):
            cols["n"].append(r.n)
            cols["speed_lo"].append(float(r.speed_edges[b]))
            cols["speed_hi"].append(float(r.speed_edges[b + 1]))
            cols["f1_density"].append(float(r.f1_bins[b]))
            cols["f1_sigma"].append(float(r.f1_bins_sigma[b]))
            cols["overlap_mass"].append(float(r.overlap_bins[b]))
            cols["overlap_sigma"].append(float(r.overlap_bins_sigma[b]))
            cols["ratio"].append(float(r.ratio_bins[b]))
    meta = {"rows": len(cols["n"]), "kind": "correction_term"}
    return meta, cols
