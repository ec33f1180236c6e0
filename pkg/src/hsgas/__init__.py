"""Event-driven hard-sphere gas in a spherical container, with the
statistical machinery to study how its one-particle description behaves as
the sphere diameter shrinks with particle number at fixed N d^2."""

from ._version import __version__
from .core import (DomainError, DomainSpec, ModelParams, PackingError,
                   SimulationError, SystemState, make_params)
from .dynamics import (Engine, EngineDiagnostics, EventLog, EVENT_DTYPE,
                       OverlapError)
from .ensemble import (EnsembleResult, EnsembleSpec, ReplicaResult,
                       initial_state, replica_rng, run_ensemble)
from .estimators import (ContactEstimate, ContinuationSplit, EstimatorConfig,
                         EstimatorCollector, FactorizationDefect, FieldProfile,
                         NestedBallProbe, PhaseDensity, TransportResidual,
                         boltzmann_collision_integral, build_phase_density,
                         collector_factory, contact_statistics,
                         continuation_split, factorization_defect,
                         field_profile, free_fraction, free_streaming_residual,
                         nested_ball_probe)
from .sweep import (FitError, PlanError, PowerLawFit, SweepPlan, SweepRecord,
                    SweepResult, compare_terms, execute_sweep, fit_power_law,
                    validate_plan)
from .verify import BatteryResult, CheckResult, run_battery

__all__ = [
    "__version__",
    "BatteryResult",
    "CheckResult",
    "ContactEstimate",
    "ContinuationSplit",
    "DomainError",
    "DomainSpec",
    "Engine",
    "EngineDiagnostics",
    "EnsembleResult",
    "EnsembleSpec",
    "EstimatorCollector",
    "EstimatorConfig",
    "EVENT_DTYPE",
    "EventLog",
    "FactorizationDefect",
    "FieldProfile",
    "FitError",
    "ModelParams",
    "NestedBallProbe",
    "OverlapError",
    "PackingError",
    "PhaseDensity",
    "PlanError",
    "PowerLawFit",
    "ReplicaResult",
    "SimulationError",
    "SweepPlan",
    "SweepRecord",
    "SweepResult",
    "SystemState",
    "TransportResidual",
    "boltzmann_collision_integral",
    "build_phase_density",
    "collector_factory",
    "compare_terms",
    "contact_statistics",
    "continuation_split",
    "execute_sweep",
    "factorization_defect",
    "field_profile",
    "fit_power_law",
    "free_fraction",
    "free_streaming_residual",
    "initial_state",
    "make_params",
    "nested_ball_probe",
    "replica_rng",
    "run_battery",
    "run_ensemble",
    "validate_plan",
]
