import dataclasses
import math

import numpy as np
import pytest
import scipy.stats

from hsgas import persist
from hsgas.core import DomainSpec, make_params
from hsgas.persist import CheckpointError
from hsgas.sweep import (FLUX_MIN_COUNTS, FitError, PlanError, SweepPlan,
                         SweepRecord, _ksup_statistic, _overlap_mass_statistic,
                         _record_to_payload, compare_terms, defect_monotone,
                         execute_sweep, fit_power_law, load_record,
                         overlap_columns, overlap_decay_fit, plan_fingerprint,
                         rate_spread, record_path, records_columns, rung_seed,
                         save_record, validate_plan, van_hove_columns)

DOM = DomainSpec.from_volume(1.0)


def _plan(**kw):
    base = dict(c=0.35, n_values=(24, 48), domain=DOM, base_seed=777,
                burn_in_mct=0.3, horizon_mct=1.2, n_samples=6,
                replica_budget=0, min_replicas=12, mc_samples=2000,
                n_probe_speeds=3, n_boot=40)
    base.update(kw)
    return SweepPlan(**base)


# ---------------------------------------------------------------------------
# plan validation


def test_validate_plan_rows():
    plan = _plan(n_values=(32, 64, 128), replica_budget=512, min_replicas=2)
    rows = validate_plan(plan)
    assert [r["n"] for r in rows] == [32, 64, 128]
    for r in rows:
        assert r["d"] == plan.c / math.sqrt(r["n"])
        assert r["replicas"] == max(2, 512 // r["n"])
        span = plan.burn_in_mct + plan.horizon_mct
        assert r["predicted_events"] == pytest.approx(r["replicas"] * r["n"] * span / 2)
    etas = [r["eta_bar"] for r in rows]
    assert etas == sorted(etas, reverse=True)


@pytest.mark.parametrize("kw", [
    {"n_values": ()},
    {"n_values": (64, 32)},
    {"n_values": (8, 8)},
    {"n_values": (1, 4)},
    {"n_values": (2.5, 4)},
    {"c": 0.0},
    {"horizon_mct": 0.0},
    {"burn_in_mct": -0.1},
    {"n_samples": -1},
])
def test_validate_plan_rejects_bad_plans(kw):
    with pytest.raises(PlanError):
        validate_plan(_plan(**kw))


def test_validate_plan_rejects_overpacked_first_rung():
    with pytest.raises(PlanError, match="not runnable"):
        validate_plan(_plan(c=1.2, n_values=(9, 100)))


def test_validate_plan_catches_scaling_drift(monkeypatch):
    real = SweepPlan.params_for

    def broken(self, n):
        p = real(self, n)
        return dataclasses.replace(p, d=p.d * (1.0 + 1e-6))

    monkeypatch.setattr(SweepPlan, "params_for", broken)
    with pytest.raises(PlanError, match="drifted"):
        validate_plan(_plan())


def test_replicas_for_budget_floor():
    plan = _plan(replica_budget=1000, min_replicas=8)
    assert plan.replicas_for(50) == 20
    assert plan.replicas_for(500) == 8  # floor wins


def test_rung_seed_deterministic_and_distinct():
    assert rung_seed(5, 125) == rung_seed(5, 125)
    seeds = {rung_seed(5, n) for n in (125, 250, 500, 1000)}
    assert len(seeds) == 4
    assert rung_seed(6, 125) != rung_seed(5, 125)
    assert 0 <= rung_seed(5, 125) < 2**64


def test_plan_fingerprint_tracks_content():
    a = plan_fingerprint(_plan())
    assert a == plan_fingerprint(_plan())
    assert a != plan_fingerprint(_plan(c=0.36))
    assert a != plan_fingerprint(_plan(base_seed=778))
    assert len(a) == 64  # sha256 hex


# ---------------------------------------------------------------------------
# power-law fitting


def test_fit_power_law_exact():
    x = np.array([100.0, 400.0, 1600.0])
    y = 2.0 * x**-0.5
    fit = fit_power_law(x, y, n_boot=200)
    assert fit.exponent == pytest.approx(-0.5, abs=1e-12)
    assert fit.amplitude == pytest.approx(2.0, rel=1e-12)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.residual_rms < 1e-14
    assert fit.sigma < 1e-12
    assert fit.ci_low == pytest.approx(-0.5, abs=1e-9)
    assert fit.ci_high == pytest.approx(-0.5, abs=1e-9)


def test_fit_power_law_constant_series():
    fit = fit_power_law([1.0, 2.0, 4.0, 8.0], [3.0, 3.0, 3.0, 3.0], n_boot=50)
    assert fit.exponent == pytest.approx(0.0, abs=1e-14)
    assert fit.r_squared == 1.0  # zero-variance target counts as a perfect fit


def test_fit_power_law_matches_linregress():
    rng = np.random.default_rng(12)
    x = np.array([50.0, 100.0, 200.0, 400.0, 800.0, 1600.0])
    y = 5.0 * x**-0.43 * np.exp(rng.normal(0, 0.05, size=len(x)))
    fit = fit_power_law(x, y, n_boot=500, rng=np.random.default_rng(1))
    ref = scipy.stats.linregress(np.log(x), np.log(y))
    assert fit.exponent == pytest.approx(ref.slope, abs=1e-12)
    assert math.log(fit.amplitude) == pytest.approx(ref.intercept, abs=1e-12)
    assert fit.r_squared == pytest.approx(ref.rvalue**2, abs=1e-12)
    # bootstrap spread in the same ballpark as the analytic slope error
    assert fit.sigma == pytest.approx(ref.stderr, rel=0.6)
    assert fit.ci_low < fit.exponent < fit.ci_high


@pytest.mark.parametrize("x,y", [
    ([1.0, 2.0], [1.0, 2.0]),
    ([1.0, 2.0, 3.0], [1.0, -2.0, 3.0]),
    ([1.0, 2.0, 3.0], [1.0, 0.0, 3.0]),
    ([1.0, 2.0, 3.0], [1.0, math.nan, 3.0]),
    ([1.0, 2.0, 3.0], [[1.0, 2.0, 3.0]]),
])
def test_fit_power_law_error_paths(x, y):
    with pytest.raises(FitError):
        fit_power_law(x, y, n_boot=10)


# ---------------------------------------------------------------------------
# sweep statistics on synthetic tables


def test_overlap_mass_statistic_formula():
    m1_bar = np.array([1.5, 3.0])
    stat = _overlap_mass_statistic(m1_bar, d=0.1, n_part=10)
    tables = [
        {"flux_counts": np.array([4.0, 8.0]), "meas_time": 2.0},
        {"flux_counts": np.array([2.0, 0.0]), "meas_time": 2.0},
    ]
    factor = 4.0 * 0.1 / (3.0 * 10)
    expect = factor * (6.0 / (4.0 * 1.5) + 8.0 / (4.0 * 3.0))
    assert stat(tables) == pytest.approx(expect, rel=1e-13)


def test_ksup_statistic_masks_and_maximum():
    p = make_params(10, d=0.15, domain=DOM)
    vel_vols = np.array([1.0, 2.0])
    v_avail = 5.0
    m1_bar = np.array([1.0, 2.0])
    table = {"flux_counts": np.array([10.0, 10.0]), "meas_time": 5.0,
             "f1_coarse": np.array([0.3, 0.4]), "snapshots": 2}
    ball = 4.0 * math.pi / 3.0 * p.d**3
    scale = (p.N - 1) * p.d**3 / p.volume
    flux = table["flux_counts"] / (5.0 * math.pi * p.d**2 * m1_bar * vel_vols * v_avail)
    f1 = (table["f1_coarse"] / 2) / (vel_vols * v_avail)
    ratios = (ball * flux / p.N) / (scale * f1)

    only_first = _ksup_statistic(vel_vols, v_avail, p.d, m1_bar, p,
                                 np.array([True, False]))
    assert only_first([table]) == pytest.approx(ratios[0], rel=1e-12)
    both = _ksup_statistic(vel_vols, v_avail, p.d, m1_bar, p,
                           np.array([True, True]))
    assert both([table]) == pytest.approx(ratios.max(), rel=1e-12)
    neither = _ksup_statistic(vel_vols, v_avail, p.d, m1_bar, p,
                              np.array([False, False]))
    assert math.isnan(neither([table]))


def _dummy_record(n=100, **kw):
    base = dict(
        n=n, d=0.05, c=0.5, eta_bar=0.01, replicas=4, seed=1,
        rate_mean=1.0, rate_sem=0.01, rate_dilute=1.0,
        overlap_mass=1e-4, overlap_mass_sigma=1e-5,
        k_sup=4.0, k_sup_sigma=0.5,
        defect=0.1, defect_sigma=0.01,
        free_frac=0.9, free_frac_sem=0.01,
        residual_l2=0.0, residual_l2_sigma=1.0,
        residual_norm=0.0, residual_raw_l1=0.1, residual_scale=1.0,
        collision_l2=0.0, collision_l2_sigma=1.0,
        collision_q_mean_abs=0.01, collision_q_sigma=0.001,
        contact_max_z=1.0, max_local_eta=0.01, field_flat_z=1.0,
        min_gap_over_d=0.001, min_wall_clearance_over_d=0.001,
        max_energy_drift_rel=1e-16, max_momentum_drift_rel=1e-16,
        events_pair=100, events_wall=50,
        speed_edges=np.linspace(0.0, 4.5, 3),
        f1_bins=np.array([1.0, 2.0]),
        f1_bins_sigma=np.array([0.1, 0.2]),
        overlap_bins=np.array([0.01, 0.02]),
        overlap_bins_sigma=np.array([0.001, 0.002]),
        ratio_bins=np.array([3.0, 4.0]),
        probe_speeds=np.array([0.5, 1.5]),
        q_values=np.array([0.0, 0.1]),
        q_sigmas=np.array([0.01, 0.01]),
        vh_radii=np.array([0.1, 0.3]),
        vh_counts=np.array([5.0, 50.0]),
        vh_counts_sem=np.array([0.5, 1.0]),
        vh_volumes=np.array([0.004, 0.1]),
        vh_count_ratio=np.array([0.1, 1.0]),
        vh_density_ratio=np.array([1.0, 1.0]),
        vh_flagged=np.array([0, 0], dtype=np.uint8),
        manifest={"note": "synthetic"},
    )
    base.update(kw)
    return SweepRecord(**base)


def test_rate_spread_formula():
    recs = [_dummy_record(rate_mean=v) for v in (1.0, 1.1, 0.9)]
    assert rate_spread(recs) == pytest.approx(0.2, rel=1e-12)


def test_defect_monotone_with_slack():
    ok = [_dummy_record(defect=0.5, defect_sigma=0.01),
          _dummy_record(defect=0.4, defect_sigma=0.01),
          _dummy_record(defect=0.45, defect_sigma=0.1)]
    assert defect_monotone(ok)
    bad = [_dummy_record(defect=0.5, defect_sigma=0.01),
           _dummy_record(defect=0.8, defect_sigma=0.01)]
    assert not defect_monotone(bad)
    assert defect_monotone(bad, slack_sigmas=30.0)


def test_record_round_trip_bitwise(tmp_path):
    rec = _dummy_record(residual_l2=math.nan, contact_max_z=math.inf)
    path = tmp_path / "rung.ckpt"
    save_record(path, rec, plan_hash="abc123")
    back = load_record(path, plan_hash="abc123")
    m0, a0 = _record_to_payload(rec)
    m1, a1 = _record_to_payload(back)
    assert persist.canonical_json(m0) == persist.canonical_json(m1)
    assert set(a0) == set(a1)
    for k in a0:
        assert a0[k].tobytes() == a1[k].tobytes()
        assert a0[k].dtype == a1[k].dtype
    with pytest.raises(CheckpointError):
        load_record(path, plan_hash="somethingelse")


# ---------------------------------------------------------------------------
# micro sweep end to end


def _payload_bytes(rec):
    meta, arrays = _record_to_payload(rec)
    blob = persist.canonical_json(meta).encode()
    for k in sorted(arrays):
        blob += k.encode() + arrays[k].tobytes()
    return blob


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    plan = _plan()
    result = execute_sweep(plan, out_dir=str(out))
    return plan, str(out), result


def test_micro_sweep_completes(micro):
    plan, out, result = micro
    assert result.completed
    assert [r.n for r in result.records] == [24, 48]
    assert result.fingerprint == plan_fingerprint(plan)
    import os
    for n in plan.n_values:
        assert os.path.exists(record_path(out, n))
    for rec in result.records:
        assert rec.replicas == 12
        assert rec.events_pair > 0
        assert rec.rate_mean > 0
        assert rec.overlap_mass > 0
        assert rec.min_gap_over_d >= -1e-9
        assert rec.seed == rung_seed(plan.base_seed, rec.n)
        assert rec.manifest["rung_seed"] == rec.seed


def test_micro_sweep_resume_is_bitwise_stable(micro):
    plan, out, result = micro
    again = execute_sweep(plan, out_dir=out)  # loads every rung from disk
    assert again.completed
    for a, b in zip(result.records, again.records):
        assert _payload_bytes(a) == _payload_bytes(b)


def test_micro_sweep_recompute_matches_disk(micro):
    plan, out, result = micro
    fresh = execute_sweep(plan, out_dir=None)  # no checkpoints involved
    for a, b in zip(result.records, fresh.records):
        assert _payload_bytes(a) == _payload_bytes(b)


def test_stop_after_and_partial_resume(micro, tmp_path):
    plan, _, full = micro
    out = str(tmp_path / "partial")
    first = execute_sweep(plan, out_dir=out, stop_after=1)
    assert not first.completed
    assert [r.n for r in first.records] == [24]
    resumed = execute_sweep(plan, out_dir=out)
    assert resumed.completed
    for a, b in zip(full.records, resumed.records):
        assert _payload_bytes(a) == _payload_bytes(b)


def test_should_stop_ends_early(micro, tmp_path):
    plan, _, _ = micro
    calls = []

    def stop():
        calls.append(1)
        return True

    res = execute_sweep(plan, out_dir=str(tmp_path / "s"), should_stop=stop)
    assert len(res.records) == 1
    assert not res.completed
    assert len(calls) == 1


def test_progress_callback(micro, tmp_path):
    plan, out, _ = micro
    seen = []
    execute_sweep(plan, out_dir=out, progress=lambda r: seen.append(r.n))
    assert seen == [24, 48]


def test_compare_terms_structure(micro):
    plan, _, result = micro
    comp = compare_terms(result.records)
    assert comp["n"] == [24, 48]
    assert len(comp["residual_zero_consistent"]) == 2
    assert all(isinstance(b, bool) for b in comp["residual_zero_consistent"])
    assert comp["rate_spread"] >= 0
    assert isinstance(comp["defect_monotone"], bool)
    assert comp["k_sup_spread"] >= 1.0
    # two rungs cannot support a power-law fit; the reason must be recorded
    assert "error" in comp["overlap_fit"]
    with pytest.raises(FitError):
        overlap_decay_fit(result.records)


def test_csv_column_builders(micro):
    plan, _, result = micro
    meta, cols = records_columns(result.records)
    assert meta["rows"] == 2
    assert cols["n"] == [24, 48]
    assert "speed_edges" not in cols and "manifest" not in cols
    assert len({len(v) for v in cols.values()}) == 1

    vmeta, vcols = van_hove_columns(result.records)
    n_radii = len(result.records[0].vh_radii)
    assert vmeta["rows"] == 2 * n_radii
    assert vcols["n"][:n_radii] == [24] * n_radii

    ometa, ocols = overlap_columns(result.records)
    n_bins = len(result.records[0].overlap_bins)
    assert ometa["rows"] == 2 * n_bins
    assert ocols["speed_lo"][0] == 0.0
    assert all(lo < hi for lo, hi in zip(ocols["speed_lo"], ocols["speed_hi"]))


def test_flux_threshold_is_applied(micro):
    plan, _, result = micro
    for rec in result.records:
        # bins marked invalid carry NaN ratios, valid ones are finite
        finite = np.isfinite(rec.ratio_bins)
        assert finite.any()
        assert np.all(rec.ratio_bins[finite] > 0)
    assert FLUX_MIN_COUNTS == 25
