"""Linear-quadratic mean-field games over scheduled, noisy communication links."""

from .kernels import SolveReport, SolverError, solve_dare, solve_stein, spectral_norm
from .model import (
    AgentTypeParams,
    ConfigError,
    GameConfig,
    NoiseModel,
    SchedulerParams,
    TypeDistribution,
    check_structural_assumptions,
    load_config,
    sample_types,
)
from .solver import (
    AssumptionViolation,
    EquilibriumSolution,
    compute_gains,
    contraction_diagnostics,
    control_policy,
    feedforward,
    mf_trajectory,
    solve_equilibrium,
    solve_mf_law,
    tbar_apply,
)
from .sim import PolicySpec, dual_effect_probe, nash_gap, run_game

__version__ = "0.1.0"
