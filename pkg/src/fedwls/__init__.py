"""Federated weighted least squares over noisy links.

Simulator for consensus-penalty federated WLS with random client scheduling
and additive Gaussian link noise, plus the matching steady-state mean and
mean-square analysis. See the README for a tour of the modules.
"""

__version__ = "0.1.0"

from .dataset import (
    DataGenConfig,
    WeightMode,
    WlsProblem,
    ClientPrecompute,
    DegenerateProblemError,
    generate_problem,
    optimal_wls,
    precompute_client,
    precompute_all,
)
from .channel import (
    ChannelConfig,
    SchedulerConfig,
    SchedulerMode,
    RoundSchedule,
    draw_schedule,
    corrupt,
)
from .algorithms import AlgorithmVariant, RunConfig, init_states, run
from .theory import (
    MeanLimit,
    MeanTransition,
    NoiseMoments,
    QMatrix,
    SecondMomentAnalysis,
    SpectralReport,
    TheoryReport,
    build_q_closed_form,
    build_q_monte_carlo,
    bvec,
    bvec_inv,
    block_kronecker,
    check_spectral_properties,
    consensus_projector,
    extended_target,
    initial_extended_state,
    mean_limit,
    mean_transition,
    noise_moments,
    sample_transition,
    steady_state_mse,
    unit_mode_noise_coupling,
)
from .harness import (
    BiasScalingResult,
    ComparisonReport,
    DIVERGENCE_CUTOFF_DB,
    DIVERGENCE_MARKER_DB,
    ExperimentConfig,
    LearningCurve,
    MonteCarloResult,
    NMSE_FLOOR_DB,
    TheorySimPoint,
    bias_metric,
    compare_theory_sim,
    nmse,
    run_bias_scaling,
    run_monte_carlo,
    write_bias_csv,
    write_comparison_csv,
    write_curve_csv,
    write_manifest,
)

__all__ = [
    "DataGenConfig",
    "WeightMode",
    "WlsProblem",
    "ClientPrecompute",
    "DegenerateProblemError",
    "generate_problem",
    "optimal_wls",
    "precompute_client",
    "precompute_all",
    "ChannelConfig",
    "SchedulerConfig",
    "SchedulerMode",
    "RoundSchedule",
    "draw_schedule",
    "corrupt",
    "AlgorithmVariant",
    "RunConfig",
    "init_states",
    "run",
    "MeanLimit",
    "MeanTransition",
    "NoiseMoments",
    "QMatrix",
    "SecondMomentAnalysis",
    "SpectralReport",
    "TheoryReport",
    "build_q_closed_form",
    "build_q_monte_carlo",
    "bvec",
    "bvec_inv",
    "block_kronecker",
    "check_spectral_properties",
    "consensus_projector",
    "extended_target",
    "initial_extended_state",
    "mean_limit",
    "mean_transition",
    "noise_moments",
    "sample_transition",
    "steady_state_mse",
    "unit_mode_noise_coupling",
    "BiasScalingResult",
    "ComparisonReport",
    "DIVERGENCE_CUTOFF_DB",
    "DIVERGENCE_MARKER_DB",
    "ExperimentConfig",
    "LearningCurve",
    "MonteCarloResult",
    "NMSE_FLOOR_DB",
    "TheorySimPoint",
    "bias_metric",
    "compare_theory_sim",
    "nmse",
    "run_bias_scaling",
    "run_monte_carlo",
    "write_bias_csv",
    "write_comparison_csv",
    "write_curve_csv",
    "write_manifest",
]
