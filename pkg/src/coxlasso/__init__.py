"""Lasso-penalized Cox regression with time-dependent covariates, plus
numerical checks of its oracle inequalities."""

__version__ = "0.1.0"

from .data import (
    CovariatePath,
    Dataset,
    DatasetFormatError,
    DimensionError,
    Subject,
    ValidationReport,
    covariate_at,
    load_dataset,
    save_dataset,
    validate_dataset,
)
from .factors import (
    ConeSpec,
    FactorReport,
    all_factors,
    compatibility_factor,
    restricted_eigenvalue,
    solve_eta,
    solve_t_npe,
    theorem3_lower_bound,
    weak_cone_invertibility,
)
from .hessians import (
    TruncationSpec,
    compensated_hessian,
    population_sigma,
    truncated_hessian,
    weight_truncated_hessian,
)
from .likelihood import (
    EmptyRiskSetError,
    bregman_divergence,
    eta_b,
    gradient,
    hessian,
    neg_log_partial_likelihood,
    risk_set_moments,
)
from .simulate import BaselineHazard, SimConfig, simulate_dataset, true_intensity_integral
from .solver import (
    FitResult,
    SolverOptions,
    fit_lasso,
    fit_path,
    kkt_residual,
    lambda_max,
    soft_threshold,
    theoretical_lambda,
)
