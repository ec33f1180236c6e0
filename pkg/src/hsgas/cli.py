"""Command-line entry points.

Four subcommands share one JSON config schema:

* simulate  -- run one system (or a small ensemble) and write the event log,
               histograms, and a manifest
* sweep     -- run the diameter-scaling ladder with per-rung checkpoints and
               summary tables
* verify    -- run the built-in correctness battery and write a
               machine-readable result file
* report    -- regenerate the sweep summary tables from checkpoints already
               on disk, without running anything

Exit codes: 0 on success, 1 when a check or validation fails (bad config,
bad plan, failed verification), 2 on runtime errors.  Config values are JSON;
`--set section.key=value` overrides individual entries and rejects keys the
schema does not know.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import signal
import sys

import numpy as np

from . import estimators, persist, stats, sweep as sweep_mod, verify as verify_mod
from ._version import __version__
from .core import DomainSpec, SimulationError, make_params
from .dynamics import Engine
from .ensemble import (ESTIMATOR_STREAM, EnsembleSpec, POSITION_STREAM,
                       VELOCITY_STREAM, initial_state, replica_rng,
                       run_ensemble)
from .estimators import EstimatorCollector, EstimatorConfig, collector_factory
from .persist import CheckpointError


class ConfigError(SimulationError):
    """Config rejected: unknown key, wrong type, or inconsistent values."""


# ---------------------------------------------------------------------------
# config schema

_LEAF = "leaf"
_SECTION = "section"

_SCHEMA = {
    "model": (_SECTION, {
        "n": (_LEAF, None, "nullable_int"),
        "c": (_LEAF, None, "nullable_number"),
        "d": (_LEAF, None, "nullable_number"),
        "T": (_LEAF, 1.0, "number"),
        "volume": (_LEAF, None, "nullable_number"),
        "radius": (_LEAF, None, "nullable_number"),
        "packing_cap": (_LEAF, 0.25, "number"),
    }),
    "ensemble": (_SECTION, {
        "replicas": (_LEAF, 1, "int"),
        "burn_in_mct": (_LEAF, 1.0, "number"),
        "horizon_mct": (_LEAF, 3.0, "number"),
        "n_samples": (_LEAF, 16, "int"),
        "mode": (_LEAF, "auto", "string"),
        "interactions": (_LEAF, True, "bool"),
    }),
    "estimators": (_SECTION, {
        "n_radial": (_LEAF, 24, "int"),
        "n_speed": (_LEAF, 32, "int"),
        "speed_max_factor": (_LEAF, 4.5, "number"),
        "n_x": (_LEAF, 24, "int"),
        "n_vx": (_LEAF, 32, "int"),
        "vx_max_factor": (_LEAF, 4.0, "number"),
        "n_contact_speed_bins": (_LEAF, 8, "int"),
        "n_contact_sub_shells": (_LEAF, 4, "int"),
        "shell_width_factor": (_LEAF, 0.1, "number"),
        "afc_speed_bins": (_LEAF, 5, "int"),
        "afc_min_separation": (_LEAF, 3.0, "number"),
        "n_field_shells": (_LEAF, 12, "int"),
        "vanhove_radius_factors": (_LEAF, [0.25, 0.4, 0.55, 0.7, 0.85, 1.0],
                                   "list_number"),
        "vanhove_offset_factor": (_LEAF, 0.0, "number"),
        "collect_time_resolved": (_LEAF, True, "bool"),
        "collect_speed_samples": (_LEAF, True, "bool"),
        "pair_scan_block": (_LEAF, 256, "int"),
    }),
    "sweep": (_SECTION, {
        "n_values": (_LEAF, [], "list_int"),
        "replica_budget": (_LEAF, 24000, "int"),
        "min_replicas": (_LEAF, 8, "int"),
        "mc_samples": (_LEAF, 40000, "int"),
        "n_probe_speeds": (_LEAF, 8, "int"),
        "n_boot": (_LEAF, 300, "int"),
    }),
    "seed": (_LEAF, 0, "int"),
    "workers": (_LEAF, 1, "int"),
}


def _type_ok(kind: str, value) -> bool:
    def is_number(x):
        return isinstance(x, (int, float)) and not isinstance(x, bool)

    def is_int(x):
        return isinstance(x, int) and not isinstance(x, bool)

    if kind == "number":
        return is_number(value)
    if kind == "nullable_number":
        return value is None or is_number(value)
    if kind == "int":
        return is_int(value)
    if kind == "nullable_int":
        return value is None or is_int(value)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "string":
        return isinstance(value, str)
    if kind == "list_number":
        return isinstance(value, (list, tuple)) and all(is_number(x) for x in value)
    if kind == "list_int":
        return isinstance(value, (list, tuple)) and all(is_int(x) for x in value)
    raise ValueError(f"unhandled schema kind {kind!r}")


def _merge_schema(schema: dict, data: dict, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping, "
                          f"got {type(data).__name__}")
    out = {}
    for key, value in data.items():
        if key not in schema:
            full = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{full}'")
    for key, entry in schema.items():
        full = f"{path}.{key}" if path else key
        if entry[0] == _SECTION:
            sub = data.get(key, {})
            out[key] = _merge_schema(entry[1], sub, full)
        else:
            _, default, kind = entry
            value = data.get(key, default)
            if isinstance(value, tuple):
                value = list(value)
            if not _type_ok(kind, value):
                raise ConfigError(
                    f"config key '{full}' expects {kind.replace('_', ' ')}, "
                    f"got {value!r}")
            out[key] = value
    return out


def _apply_override(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    here = data
    for p in parts[:-1]:
        here = here.setdefault(p, {})
        if not isinstance(here, dict):
            raise ConfigError(f"cannot override through non-section key '{p}' "
                              f"in '{dotted}'")
    here[parts[-1]] = value


def _parse_set_expr(expr: str) -> tuple[str, object]:
    key, sep, raw = expr.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def parse_config(path=None, sets=(), seed=None, workers=None) -> dict:
    """Load, override, default-fill, and validate a config mapping."""
    if path is None:
        data: dict = {}
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    for expr in sets:
        key, value = _parse_set_expr(expr)
        _apply_override(data, key, value)
    if seed is not None:
        data["seed"] = seed
    if workers is not None:
        data["workers"] = workers
    return _merge_schema(_SCHEMA, data, "")


def _build_domain(cfg: dict) -> DomainSpec:
    model = cfg["model"]
    if model["volume"] is not None and model["radius"] is not None:
        raise ConfigError("set model.volume or model.radius, not both")
    if model["radius"] is not None:
        return DomainSpec(radius=model["radius"])
    return DomainSpec.from_volume(model["volume"] if model["volume"] is not None
                                  else 1.0)


def _build_params(cfg: dict):
    model = cfg["model"]
    if model["n"] is None:
        raise ConfigError("model.n is required")
    if (model["c"] is None) == (model["d"] is None):
        raise ConfigError("exactly one of model.c and model.d must be set")
    domain = _build_domain(cfg)
    params = make_params(model["n"], c=model["c"], domain=domain, T=model["T"],
                         d=model["d"], packing_cap=model["packing_cap"])
    return params, domain


def _build_estimator_config(cfg: dict) -> EstimatorConfig:
    e = dict(cfg["estimators"])
    e["vanhove_radius_factors"] = tuple(e["vanhove_radius_factors"])
    return EstimatorConfig(**e)


def _build_plan(cfg: dict) -> sweep_mod.SweepPlan:
    model, ens, sw = cfg["model"], cfg["ensemble"], cfg["sweep"]
    if model["c"] is None:
        raise ConfigError("sweep needs model.c (the fixed N d^2 constant)")
    if model["d"] is not None:
        raise ConfigError("sweep derives d from model.c per rung; "
                          "model.d must stay unset")
    if not sw["n_values"]:
        raise ConfigError("sweep.n_values must list at least one particle count")
    return sweep_mod.SweepPlan(
        c=model["c"],
        n_values=tuple(sw["n_values"]),
        domain=_build_domain(cfg),
        T=model["T"],
        base_seed=cfg["seed"],
        burn_in_mct=ens["burn_in_mct"],
        horizon_mct=ens["horizon_mct"],
        n_samples=ens["n_samples"],
        replica_budget=sw["replica_budget"],
        min_replicas=sw["min_replicas"],
        estimator_config=_build_estimator_config(cfg),
        engine_mode=ens["mode"],
        interactions=ens["interactions"],
        packing_cap=model["packing_cap"],
        mc_samples=sw["mc_samples"],
        n_probe_speeds=sw["n_probe_speeds"],
        n_boot=sw["n_boot"],
        workers=cfg["workers"],
    )


# ---------------------------------------------------------------------------
# simulate


def _run_single_replica(params, domain, cfg):
    ens = cfg["ensemble"]
    seed = cfg["seed"]
    tau = params.mean_collision_time
    burn = ens["burn_in_mct"] * tau
    horizon = ens["horizon_mct"] * tau
    est_cfg = _build_estimator_config(cfg)
    collector = EstimatorCollector(est_cfg, params, domain,
                                   replica_rng(seed, 0, ESTIMATOR_STREAM))
    state = initial_state(params, domain,
                          replica_rng(seed, 0, VELOCITY_STREAM),
                          replica_rng(seed, 0, POSITION_STREAM))
    engine = Engine(state, params, domain, mode=ens["mode"], log_events=True,
                    interactions=ens["interactions"])
    engine.advance_to(burn)
    pairs_after_burn = engine.diag.events_pair
    collector.begin(engine.snapshot(burn), burn)
    if ens["n_samples"] > 0:
        times = burn + np.linspace(0.0, horizon, ens["n_samples"])
    else:
        times = ()
    engine.advance_to(burn + horizon, observers=(collector,), sample_times=times)
    partial = collector.partial(horizon)
    diag = engine.diag
    rate = 2.0 * (diag.events_pair - pairs_after_burn) / (params.N * horizon)
    summary = {
        "replicas": 1,
        "rate_mean": rate,
        "rate_sem": None,
        "rate_dilute": params.collision_rate_estimate,
        "events_pair": diag.events_pair,
        "events_wall": diag.events_wall,
        "max_energy_drift_rel": diag.max_energy_drift_rel,
        "max_momentum_drift_rel": diag.max_momentum_drift_rel,
        "cumulative_energy_drift_rel": diag.cumulative_energy_drift_rel,
        "min_gap_over_d": diag.min_gap_over_d,
        "min_wall_clearance_over_d": diag.min_wall_clearance_over_d,
        "burn_in": burn,
        "horizon": horizon,
    }
    return [partial], summary, engine.log.records()


def _run_replica_ensemble(params, domain, cfg):
    ens = cfg["ensemble"]
    tau = params.mean_collision_time
    spec = EnsembleSpec(
        params=params,
        domain=domain,
        replicas=ens["replicas"],
        base_seed=cfg["seed"],
        horizon=ens["horizon_mct"] * tau,
        burn_in=ens["burn_in_mct"] * tau,
        n_samples=ens["n_samples"],
        mode=ens["mode"],
        interactions=ens["interactions"],
    )
    result = run_ensemble(spec, collector_factory(_build_estimator_config(cfg)),
                          workers=cfg["workers"])
    rates = np.array([r.collision_rate for r in result.replicas])
    summary = {
        "replicas": ens["replicas"],
        "rate_mean": float(rates.mean()),
        "rate_sem": (float(rates.std(ddof=1) / math.sqrt(len(rates)))
                     if len(rates) > 1 else None),
        "rate_dilute": params.collision_rate_estimate,
        "events_pair": int(sum(r.events_pair for r in result.replicas)),
        "events_wall": int(sum(r.events_wall for r in result.replicas)),
        "max_energy_drift_rel": float(max(r.max_energy_drift_rel
                                          for r in result.replicas)),
        "max_momentum_drift_rel": float(max(r.max_momentum_drift_rel
                                            for r in result.replicas)),
        "min_gap_over_d": float(min(r.min_gap_over_d for r in result.replicas)),
        "min_wall_clearance_over_d": float(min(r.min_wall_clearance_over_d
                                               for r in result.replicas)),
        "burn_in": spec.burn_in,
        "horizon": spec.horizon,
    }
    return result.partials, summary, None


def _write_histograms(out, partials, params, domain, cfg) -> list[str]:
    est_cfg = _build_estimator_config(cfg)
    T = params.T
    written = []
    try:
        usable = [p for p in partials if p.get("snapshots", 0) > 0]
        if not usable:
            raise estimators.InsufficientSamplesError("no snapshots")
        edges_r = np.linspace(0.0, domain.radius, est_cfg.n_radial + 1)
        edges_s = np.linspace(0.0, est_cfg.speed_max_factor * math.sqrt(T),
                              est_cfg.n_speed + 1)
        density = estimators.build_phase_density(partials, edges_r, edges_s,
                                                 kind="radial_speed")
        rows = {k: [] for k in ("r_lo", "r_hi", "s_lo", "s_hi", "mass",
                                "mass_sem", "density", "density_sem")}
        for ir in range(est_cfg.n_radial):
            for isp in range(est_cfg.n_speed):
                rows["r_lo"].append(edges_r[ir])
                rows["r_hi"].append(edges_r[ir + 1])
                rows["s_lo"].append(edges_s[isp])
                rows["s_hi"].append(edges_s[isp + 1])
                rows["mass"].append(float(density.mass[ir, isp]))
                rows["mass_sem"].append(float(density.mass_sem[ir, isp]))
                rows["density"].append(float(density.density[ir, isp]))
                rows["density_sem"].append(float(density.density_sem[ir, isp]))
        meta = {"kind": "phase_density", "n": params.N, "d": params.d,
                "overflow_fraction": density.overflow_fraction,
                "replicas": density.replicas}
        persist.write_csv(os.path.join(out, "phase_density.csv"), rows, meta)
        written.append("phase_density.csv")

        tables = [p["f1_rs"] / p["snapshots"] for p in usable]
        mass, sem = stats.replica_mean_sem([t.sum(axis=0) for t in tables])
        ref = np.diff([stats.maxwell_speed_cdf(s, T) for s in edges_s])
        persist.write_csv(os.path.join(out, "speed_hist.csv"), {
            "s_lo": edges_s[:-1].tolist(),
            "s_hi": edges_s[1:].tolist(),
            "mass": mass.tolist(),
            "mass_sem": sem.tolist(),
            "maxwell_mass": ref.tolist(),
        }, {"kind": "speed_marginal", "n": params.N})
        written.append("speed_hist.csv")

        profile = estimators.field_profile(partials, params, domain, est_cfg)
        persist.write_csv(os.path.join(out, "field_profile.csv"), {
            "r_lo": profile.edges[:-1].tolist(),
            "r_hi": profile.edges[1:].tolist(),
            "number_density": profile.number_density.tolist(),
            "number_density_sem": profile.number_density_sem.tolist(),
            "packing": profile.packing.tolist(),
        }, {"kind": "field_profile", "n": params.N,
            "flat_max_z": profile.flat_max_z})
        written.append("field_profile.csv")
    except estimators.InsufficientSamplesError:
        pass
    return written


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config, args.set or (), args.seed, args.workers)
    params, domain = _build_params(cfg)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)

    if cfg["ensemble"]["replicas"] == 1:
        partials, summary, events = _run_single_replica(params, domain, cfg)
    else:
        partials, summary, events = _run_replica_ensemble(params, domain, cfg)

    outputs = []
    if events is not None:
        persist.write_event_log(os.path.join(out, "events.npy"), events)
        outputs.append("events.npy")
    outputs.extend(_write_histograms(out, partials, params, domain, cfg))
    persist.write_json(os.path.join(out, "summary.json"), summary)
    outputs.append("summary.json")

    manifest = {
        "kind": "simulate",
        "code_version": __version__,
        "config_hash": persist.config_hash(cfg),
        "seed": cfg["seed"],
        "params": {
            "n": params.N, "d": params.d, "c": params.c, "T": params.T,
            "volume": params.volume, "eta_bar": params.eta_bar,
        },
        "replicas": cfg["ensemble"]["replicas"],
        "n_samples": cfg["ensemble"]["n_samples"],
        "interactions": cfg["ensemble"]["interactions"],
        "outputs": sorted(outputs + ["manifest.json"]),
    }
    persist.write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"simulate: N={params.N} events={summary['events_pair']} pair / "
          f"{summary['events_wall']} wall, rate={summary['rate_mean']:.4f} "
          f"(dilute {summary['rate_dilute']:.4f})")
    print(f"wrote {', '.join(sorted(outputs + ['manifest.json']))} to {out}")
    return 0


# ---------------------------------------------------------------------------
# sweep and report


def _write_sweep_outputs(out, records) -> list[str]:
    meta, cols = sweep_mod.records_columns(records)
    persist.write_csv(os.path.join(out, "records.csv"), cols, meta)
    meta, cols = sweep_mod.overlap_columns(records)
    persist.write_csv(os.path.join(out, "correction_terms.csv"), cols, meta)
    meta, cols = sweep_mod.van_hove_columns(records)
    persist.write_csv(os.path.join(out, "nested_balls.csv"), cols, meta)
    persist.write_json(os.path.join(out, "compare_terms.json"),
                       sweep_mod.compare_terms(records))
    return ["records.csv", "correction_terms.csv", "nested_balls.csv",
            "compare_terms.json"]


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config, args.set or (), args.seed, args.workers)
    plan = _build_plan(cfg)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)

    stop = {"requested": False}

    def handler(signum, frame):
        stop["requested"] = True
        print(f"\nsignal {signum}: finishing the current rung, then "
              "checkpointing and exiting", file=sys.stderr)

    old_term = signal.signal(signal.SIGTERM, handler)
    old_int = signal.signal(signal.SIGINT, handler)
    try:
        result = sweep_mod.execute_sweep(
            plan, out_dir=out, workers=cfg["workers"],
            resume=not args.no_resume,
            should_stop=lambda: stop["requested"],
            progress=lambda rec: print(
                f"rung N={rec.n}: rate={rec.rate_mean:.4f} "
                f"overlap={rec.overlap_mass:.3e} k_sup={rec.k_sup:.2f}"),
        )
    finally:
        signal.signal(signal.SIGTERM, old_term)
        signal.signal(signal.SIGINT, old_int)

    written = _write_sweep_outputs(out, result.records)
    manifest = {
        "kind": "sweep",
        "code_version": __version__,
        "config_hash": persist.config_hash(cfg),
        "plan_fingerprint": result.fingerprint,
        "seed": cfg["seed"],
        "n_values": list(plan.n_values),
        "completed": result.completed,
        "outputs": sorted(written + ["manifest.json"]),
    }
    persist.write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {', '.join(sorted(written))} to {out}")
    if not result.completed:
        print("sweep interrupted; rerun the same command to resume",
              file=sys.stderr)
        return 2
    return 0


def cmd_report(args) -> int:
    out = args.out or "."
    try:
        names = sorted(fn for fn in os.listdir(out)
                       if fn.startswith("sweep_n") and fn.endswith(".ckpt"))
    except OSError as exc:
        raise ConfigError(f"cannot list {out}: {exc}") from exc
    if not names:
        raise ConfigError(f"no sweep checkpoints (sweep_n*.ckpt) in {out}")
    records = [sweep_mod.load_record(os.path.join(out, fn)) for fn in names]
    records.sort(key=lambda r: r.n)
    written = _write_sweep_outputs(out, records)
    print(f"report: regenerated {', '.join(sorted(written))} from "
          f"{len(records)} checkpoints in {out}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    checks = args.checks.split(",") if args.checks else None
    if checks:
        unknown = set(checks) - set(verify_mod.CHECK_NAMES)
        if unknown:
            raise ConfigError(f"unknown check names: {sorted(unknown)}; "
                              f"available: {', '.join(verify_mod.CHECK_NAMES)}")
    import time
    t0 = time.time()

    def progress(name, res):
        status = "pass" if res.passed else "FAIL"
        print(f"[{time.time() - t0:6.1f}s] {status}  {name}")

    battery = verify_mod.run_battery(workers=args.workers or 1,
                                     fault=args.inject_fault,
                                     checks=checks, progress=progress)
    path = os.path.join(out, "verify.json")
    persist.write_json(path, battery.payload())
    verdict = "all checks passed" if battery.passed else "CHECKS FAILED"
    print(f"{verdict} ({len(battery.checks)} checks, {time.time() - t0:.1f}s); "
          f"results in {path}")
    return 0 if battery.passed else 1


# ---------------------------------------------------------------------------
# entry point


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None,
                   help="JSON config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append",
                   help="override one config entry (repeatable, dotted keys)")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="output directory (default: current directory)")
    p.add_argument("--workers", metavar="K", type=int, default=None,
                   help="worker processes for replica ensembles")
    p.add_argument("--seed", metavar="S", type=int, default=None,
                   help="base seed override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsgas",
        description="event-driven hard-sphere gas simulation and analysis")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_sim = subs.add_parser("simulate", help="run one configuration")
    _common_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = subs.add_parser("sweep", help="run the diameter-scaling ladder")
    _common_flags(p_sweep)
    p_sweep.add_argument("--no-resume", action="store_true",
                         help="recompute rungs even if checkpoints exist")
    p_sweep.set_defaults(func=cmd_sweep)

    p_ver = subs.add_parser("verify", help="run the built-in check battery")
    _common_flags(p_ver)
    p_ver.add_argument("--checks", metavar="A,B", default=None,
                       help="comma-separated subset of checks")
    p_ver.add_argument("--inject-fault", action="store_true",
                       help="flip the pair-impulse sign to prove the "
                            "conservation check can fail")
    p_ver.set_defaults(func=cmd_verify)

    p_rep = subs.add_parser("report", help="rebuild sweep tables from checkpoints")
    _common_flags(p_rep)
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, sweep_mod.PlanError, sweep_mod.FitError,
            CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
