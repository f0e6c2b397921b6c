"""Finite-horizon feedback-rate toolkit for Gaussian channels with
partially observable state-space noise.

Two independent engines compute the same n-block objective: a sequential
(filter-based) engine operating on per-step gains, and a matrix-form engine
operating on whole-horizon triangular maps.  Their agreement at the optimum
is the package's central cross-check; `mc_sim` validates sample-path claims
statistically and `cli` exposes everything as commands.
"""

from .model import (
    ChannelConfig,
    ModelFormatError,
    PoSsRealization,
    ValidationReport,
    assemble_noise_covariance,
    build_arma11,
    build_two_driver,
    build_white_noise,
    is_time_invariant,
    load_model,
    noise_mean,
    save_model,
    validate_realization,
    with_horizon,
)
from .noise_filter import (
    NoiseFilterTrace,
    noise_entropy,
    noise_entropy_terms,
    noise_riccati_step,
    run_noise_filter,
)
from .channel_filter import (
    OutputFilterTrace,
    SequentialStrategy,
    output_riccati_step,
    run_output_filter,
)
from .capacity import (
    AsymptoticReport,
    CapacityResult,
    OptimizerDiagnostics,
    OptimizerOptions,
    SteadyStateResult,
    asymptotic_rate_estimate,
    evaluate_rate,
    optimize_strategy,
    perfect_state_rate,
    steady_state_riccati,
)
from .oracle import (
    CoverPombraStrategy,
    CpOptimizeResult,
    InnovationsFormStrategy,
    cp_objective,
    cp_optimize,
    cp_to_innovations_form,
    joint_covariance,
    unroll_sequential,
)
from .mc_sim import (
    EmpiricalRate,
    OrthogonalityReport,
    SimulationTrace,
    check_orthogonality,
    empirical_rate,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelConfig",
    "ModelFormatError",
    "PoSsRealization",
    "ValidationReport",
    "assemble_noise_covariance",
    "build_arma11",
    "build_two_driver",
    "build_white_noise",
    "is_time_invariant",
    "load_model",
    "noise_mean",
    "save_model",
    "validate_realization",
    "with_horizon",
    "NoiseFilterTrace",
    "noise_entropy",
    "noise_entropy_terms",
    "noise_riccati_step",
    "run_noise_filter",
    "OutputFilterTrace",
    "SequentialStrategy",
    "output_riccati_step",
    "run_output_filter",
    "AsymptoticReport",
    "CapacityResult",
    "OptimizerDiagnostics",
    "OptimizerOptions",
    "SteadyStateResult",
    "asymptotic_rate_estimate",
    "evaluate_rate",
    "optimize_strategy",
    "perfect_state_rate",
    "steady_state_riccati",
    "CoverPombraStrategy",
    "CpOptimizeResult",
    "InnovationsFormStrategy",
    "cp_objective",
    "cp_optimize",
    "cp_to_innovations_form",
    "joint_covariance",
    "unroll_sequential",
    "EmpiricalRate",
    "OrthogonalityReport",
    "SimulationTrace",
    "check_orthogonality",
    "empirical_rate",
    "simulate",
]
