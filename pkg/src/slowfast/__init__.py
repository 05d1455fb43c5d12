"""Averaging of slow-fast diffusions driven by a state-dependent switching chain."""

from .averaging import (
    AveragedCoefficients,
    AveragedModel,
    LocalCoefficients,
    average,
    averaged_model,
    local_coefficients,
    sqrt_spd,
)
from .chain import (
    ChainPath,
    ergodicity_probe,
    invariant_measure,
    sample_chain_frozen,
    transition_matrix,
)
from .model import (
    SwitchingModel,
    builtin_model,
    check_centering,
    effective_generator,
    total_rate,
    validate_generator,
)
from .poisson import phi_jacobian, phi_mc_estimate, solve_cell_problem
from .sde import (
    OrderFit,
    PathSample,
    SimConfig,
    WeakErrorStudy,
    analytic_example_error,
    fit_order,
    mc_expectation,
    simulate_averaged,
    simulate_slow_fast,
    test_function,
    weak_error_study,
)
from .stats import MonteCarloEstimate

__version__ = "0.1.0"
