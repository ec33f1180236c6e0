"""Release acceptance battery.

One test per release criterion, each pinned to its stated tolerance and
printing a single verdict line (visible with -s, or in captured output on
failure).  The expensive shared runs, a 1e5-event conservation engine and a
five-rung diameter-scaling ladder, are module fixtures; everything here is
deterministic, so the observed margins are stable run to run.
"""

import json
import math
import os
import time

import numpy as np
import pytest
import scipy.stats as sps

import hsgas.estimators as estimators
import hsgas.stats as stats
from hsgas.cli import main
from hsgas.core import DomainSpec, make_params
from hsgas.dynamics import Engine
from hsgas.ensemble import (EnsembleSpec, POSITION_STREAM, VELOCITY_STREAM,
                            initial_state, replica_rng, run_ensemble)
from hsgas.estimators import EstimatorConfig, collector_factory
from hsgas.sweep import (SweepPlan, defect_monotone, execute_sweep,
                         overlap_decay_fit, rate_spread)
from hsgas.verify import diameter_for_packing

DOM = DomainSpec.from_volume(1.0)


def _verdict(name, passed, detail):
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}", flush=True)
    assert passed, f"{name}: {detail}"


def _fresh(params, seed):
    return initial_state(params, DOM,
                         replica_rng(seed, 0, VELOCITY_STREAM),
                         replica_rng(seed, 0, POSITION_STREAM))


# ---------------------------------------------------------------------------
# shared heavy runs


@pytest.fixture(scope="module")
def engine216():
    """N=216 at collision-sphere packing 0.05, run for 1e5 events."""
    params = make_params(216, d=diameter_for_packing(0.05, 216, 1.0), domain=DOM)
    engine = Engine(_fresh(params, 9001), params, DOM, log_events=False)
    engine.advance_to(1e9, max_events=100_000)
    return engine


@pytest.fixture(scope="module")
def ladder():
    """Five-rung sweep holding N d^2 fixed; replica budget 24000."""
    plan = SweepPlan(c=0.3176, n_values=(125, 250, 500, 1000, 2000),
                     domain=DOM, base_seed=2026, burn_in_mct=1.0,
                     horizon_mct=3.0, n_samples=20, replica_budget=24000,
                     min_replicas=8)
    result = execute_sweep(plan, out_dir=None)
    return plan, result.records


# ---------------------------------------------------------------------------
# criteria 1-5: single-configuration dynamics


def test_conservation_per_event_and_cumulative(engine216):
    diag = engine216.diag
    per_event = max(diag.max_energy_drift_rel, diag.max_wall_energy_drift_rel,
                    diag.max_momentum_drift_rel)
    ok = (diag.events >= 100_000 and per_event <= 1e-12
          and diag.cumulative_energy_drift_rel <= 1e-9)
    _verdict("conservation", ok,
             f"events={diag.events} per_event_drift={per_event:.3e} (<=1e-12) "
             f"cumulative={diag.cumulative_energy_drift_rel:.3e} (<=1e-9)")


def test_no_overlap_throughout_run(engine216):
    diag = engine216.diag
    ok = (diag.min_gap_over_d >= -1e-9
          and diag.min_wall_clearance_over_d >= -1e-9)
    _verdict("no_overlap", ok,
             f"min_gap/d={diag.min_gap_over_d:.3e} "
             f"min_wall_clearance/d={diag.min_wall_clearance_over_d:.3e} "
             "(both >= -1e-9)")


def test_velocity_reversal_returns_to_start():
    params = make_params(27, d=diameter_for_packing(0.05, 27, 1.0), domain=DOM)
    start = _fresh(params, 7301)
    engine = Engine(start.copy(), params, DOM, log_events=False)
    engine.advance_to(1e9, max_events=50)
    t_stop = engine.time + 1e-6  # settle just past the 50th event
    engine.advance_to(t_stop)
    assert engine.diag.events == 50
    mid = engine.snapshot(t_stop)
    mid.vel[:] = -mid.vel
    mid.time = 0.0
    back = Engine(mid, params, DOM, log_events=False)
    back.advance_to(t_stop - start.time)
    pos_err = float(np.max(np.abs(back.snapshot(t_stop - start.time).pos
                                  - start.pos)))
    ok = pos_err <= 1e-6 and back.diag.events == 50
    _verdict("reversibility", ok,
             f"50 events forward+back, position error {pos_err:.3e} (<=1e-6)")


def test_equilibrium_speed_distribution_is_stationary():
    params = make_params(500, d=diameter_for_packing(0.05, 500, 1.0), domain=DOM)
    start = _fresh(params, 8401)
    horizon = 10.0 * params.mean_collision_time
    engine = Engine(start.copy(), params, DOM, log_events=False)
    engine.advance_to(horizon)
    final = engine.snapshot(horizon)
    ks = sps.ks_2samp(np.linalg.norm(start.vel, axis=1),
                      np.linalg.norm(final.vel, axis=1))
    ok = ks.pvalue > 0.01
    _verdict("equilibrium_stationarity", ok,
             f"KS p={ks.pvalue:.3f} (>0.01) over {engine.diag.events} events "
             "spanning 10 collision times")


def test_dilute_collision_rate_matches_kinetic_estimate():
    params = make_params(4000, d=diameter_for_packing(0.008, 4000, 1.0),
                         domain=DOM)
    assert params.eta_bar <= 0.01 + 1e-12
    tau = params.mean_collision_time
    burn, horizon = 0.3 * tau, 2.6 * tau
    warm = Engine(_fresh(params, 9501), params, DOM, log_events=False)
    warm.advance_to(burn)
    engine = Engine(warm.snapshot(burn), params, DOM, log_events=False)
    engine.advance_to(burn + horizon)
    rate = 2.0 * engine.diag.events_pair / (params.N * horizon)
    predicted = params.collision_rate_estimate
    rel = abs(rate - predicted) / predicted
    _verdict("dilute_rate", rel <= 0.05,
             f"measured {rate:.4f} vs kinetic {predicted:.4f}, "
             f"rel err {rel:.3%} (<=5%) at eta_bar={params.eta_bar:.4f}")


# ---------------------------------------------------------------------------
# criteria 6, 7, 9, 11: the scaling ladder


def test_ladder_rate_plateau_and_fixed_nd2(ladder):
    plan, records = ladder
    cc = plan.c**2
    nd2_err = max(abs(r.n * r.d**2 - cc) / cc for r in records)
    spread = rate_spread(records)
    ok = nd2_err <= 1e-14 and spread < 0.10
    _verdict("scaling_plateau", ok,
             f"N*d^2 rel err {nd2_err:.1e} (<=1e-14); per-particle rate "
             f"spread {spread:.3%} (<10%) across N=125..2000")


def test_correction_mass_decay_exponent(ladder):
    _, records = ladder
    fit = overlap_decay_fit(records)
    ok = -0.6 <= fit.exponent <= -0.4
    _verdict("correction_decay", ok,
             f"exponent {fit.exponent:.4f} in [-0.6, -0.4], "
             f"bootstrap CI [{fit.ci_low:.4f}, {fit.ci_high:.4f}], "
             f"r^2={fit.r_squared:.5f}")


def test_majorization_constant_stable_across_ladder(ladder):
    _, records = ladder
    ks = [r.k_sup for r in records]
    finite = all(math.isfinite(k) and k > 0 for k in ks)
    spread = max(ks) / min(ks) if finite else math.inf
    _verdict("majorization_stability", finite and spread <= 2.0,
             f"k_sup per rung {[round(k, 3) for k in ks]}, "
             f"max/min {spread:.3f} (<=2)")


def test_factorization_defect_trend(ladder):
    _, records = ladder
    ok = defect_monotone(records)
    seq = ", ".join(f"{r.defect:.4f}±{r.defect_sigma:.4f}" for r in records)
    _verdict("factorization_trend", ok,
             f"defect non-increasing within 2-sigma slack: {seq}")


# ---------------------------------------------------------------------------
# criterion 8: the two contact routes agree bin-wise


def test_contact_routes_agree_binwise():
    params = make_params(500, d=diameter_for_packing(0.02, 500, 1.0), domain=DOM)
    tau = params.mean_collision_time
    spec = EnsembleSpec(params=params, domain=DOM, replicas=24, base_seed=6101,
                        horizon=3.0 * tau, burn_in=1.0 * tau, n_samples=24)
    config = EstimatorConfig(collect_time_resolved=False,
                             collect_speed_samples=False)
    result = run_ensemble(spec, collector_factory(config))
    contact = estimators.contact_statistics(result.partials, params, DOM,
                                            config,
                                            rng=np.random.default_rng(6101))
    n_valid = int(contact.valid.sum())
    split = estimators.continuation_split(result.partials, contact, params,
                                          DOM, config, on_empty="mask")
    recon = float(np.max(np.abs(split.full_density
                                - (split.f1_density + split.overlap_density))))
    ok = n_valid >= 4 and contact.max_abs_z <= 3.0 and recon == 0.0
    _verdict("contact_route_identity", ok,
             f"shell vs flux max |z|={contact.max_abs_z:.2f} (<=3) over "
             f"{n_valid} valid bins; density split reconstructs exactly "
             f"(err {recon:.1e})")


# ---------------------------------------------------------------------------
# criterion 10: equilibrium collision-integral null


def test_maxwellian_collision_integral_null():
    params = make_params(500, d=diameter_for_packing(0.02, 500, 1.0), domain=DOM)
    n_probe = 8
    speeds = np.array([stats.maxwell_speed_quantile((k + 0.5) / n_probe, params.T)
                       for k in range(n_probe)])
    velocities = np.column_stack([speeds, np.zeros(n_probe), np.zeros(n_probe)])
    f = estimators.maxwellian_velocity_density(params.T)
    q, sig = estimators.boltzmann_collision_integral(
        f, params, velocities, n_samples=200_000,
        rng=np.random.default_rng(6202))
    floor = 1e-12 * params.N * params.d**2
    within = np.abs(q) <= 3.0 * sig + floor
    max_z = float(np.max(np.abs(q) / (sig + floor / 3.0)))
    _verdict("collision_null", len(q) >= 8 and bool(np.all(within)),
             f"{int(within.sum())}/{len(q)} probes within 3 SE of zero "
             f"(max |z|={max_z:.2e})")


# ---------------------------------------------------------------------------
# criterion 12: determinism and resume


def _dir_bytes(d):
    out = {}
    for name in sorted(os.listdir(d)):
        with open(os.path.join(d, name), "rb") as fh:
            out[name] = fh.read()
    return out


def test_reruns_and_resume_are_byte_identical(tmp_path):
    sim_args = ["simulate", "--seed", "11",
                "--set", "model.n=24", "--set", "model.c=0.6",
                "--set", "ensemble.burn_in_mct=0.2",
                "--set", "ensemble.horizon_mct=0.8",
                "--set", "ensemble.n_samples=4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*sim_args, "--out", str(a)]) == 0
    assert main([*sim_args, "--out", str(b)]) == 0
    sim_ok = _dir_bytes(a) == _dir_bytes(b)

    plan = SweepPlan(c=0.35, n_values=(24, 48), domain=DOM, base_seed=777,
                     burn_in_mct=0.3, horizon_mct=1.2, n_samples=6,
                     replica_budget=0, min_replicas=12, mc_samples=2000,
                     n_probe_speeds=3, n_boot=40)
    straight, resumed = tmp_path / "straight", tmp_path / "resumed"
    full = execute_sweep(plan, out_dir=str(straight))
    part = execute_sweep(plan, out_dir=str(resumed), stop_after=1)
    assert not part.completed
    cont = execute_sweep(plan, out_dir=str(resumed))
    sweep_ok = (cont.completed
                and _dir_bytes(straight) == _dir_bytes(resumed))

    _verdict("determinism_resume", sim_ok and sweep_ok,
             "repeated runs byte-identical (event log, histograms, summary); "
             "interrupted-and-resumed ladder equals straight-through ladder")


# ---------------------------------------------------------------------------
# criterion 13: the built-in check battery


def test_verify_battery_runs_clean_within_budget(tmp_path):
    t0 = time.monotonic()
    rc = main(["verify", "--out", str(tmp_path)])
    elapsed = time.monotonic() - t0
    payload = json.loads((tmp_path / "verify.json").read_text())
    names = [c["name"] for c in payload["checks"]]
    ok = (rc == 0 and elapsed < 300.0 and payload["passed"] is True
          and len(names) == 7)
    _verdict("verify_battery", ok,
             f"exit {rc}, {len(names)} checks "
             f"({', '.join(names)}) in {elapsed:.1f}s (<300s)")
