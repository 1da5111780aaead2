import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coxlasso.likelihood import gradient, neg_log_partial_likelihood
from coxlasso.solver import (
    SolverOptions,
    fit_lasso,
    fit_path,
    kkt_residual,
    lambda_max,
    penalized_objective,
    soft_threshold,
    theoretical_lambda,
)

import oracles
from oracles import constant_dataset, random_dataset


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 5))
def test_soft_threshold_closed_form(x, t):
    want = x - t if x > t else (x + t if x < -t else 0.0)
    assert soft_threshold(np.array([x]), t)[0] == pytest.approx(want, abs=1e-15)


def test_zero_above_lambda_max(rng):
    d = random_dataset(rng, 40, 5)
    lmax = lambda_max(d)
    assert lmax == pytest.approx(np.abs(gradient(d, np.zeros(5))).max())
    for lam in (lmax, 2 * lmax):
        fit = fit_lasso(d, lam)
        assert np.all(fit.beta_hat == 0.0)
        assert fit.converged and fit.kkt_residual == 0.0


def test_kkt_residual_examples(rng):
    d = random_dataset(rng, 40, 4)
    lmax = lambda_max(d)
    assert kkt_residual(d, np.zeros(4), lmax) == 0.0
    assert kkt_residual(d, np.zeros(4), 0.5 * lmax) == pytest.approx(0.5 * lmax, rel=1e-14)


def test_grid_search_oracle(rng):
    for _ in range(3):
        d = constant_dataset(rng, 30, 2, K=2.0)
        fit = fit_lasso(d, 0.1, SolverOptions(tolerance=1e-10))
        _, best = oracles.grid_search_p2(d, 0.1)
        assert fit.converged
        assert fit.objective <= best + 1e-8


def test_unpenalized_matches_newton(rng):
    d = random_dataset(rng, 100, 3, K=2.0, jumps=0.5)
    fit = fit_lasso(d, 0.0, SolverOptions(tolerance=1e-11))
    ref = oracles.newton_mple(d)
    assert np.abs(fit.beta_hat - ref).max() <= 1e-6


def test_objective_recomputed_and_converged_contract(rng):
    d = random_dataset(rng, 60, 6)
    fit = fit_lasso(d, 0.3 * lambda_max(d), SolverOptions(tolerance=1e-9))
    assert fit.converged and fit.kkt_residual <= 1e-9
    assert kkt_residual(d, fit.beta_hat, fit.lam) <= 1e-9
    assert fit.objective == pytest.approx(penalized_objective(d, fit.beta_hat, fit.lam), rel=1e-12)
    assert fit.objective == pytest.approx(
        neg_log_partial_likelihood(d, fit.beta_hat) + fit.lam * np.abs(fit.beta_hat).sum(), rel=1e-12)


@pytest.mark.parametrize("newton", [True, False])
def test_monotone_history(newton, rng):
    d = random_dataset(rng, 50, 5)
    fit = fit_lasso(d, 0.2 * lambda_max(d), SolverOptions(record_history=True, newton=newton, tolerance=1e-8))
    h = np.asarray(fit.history)
    assert fit.converged
    assert np.all(np.diff(h) <= 1e-12)


def test_accelerated_variant_converges(rng):
    d = random_dataset(rng, 50, 5)
    lam = 0.2 * lambda_max(d)
    a = fit_lasso(d, lam, SolverOptions(accelerated=True, newton=False, tolerance=1e-9))
    b = fit_lasso(d, lam, SolverOptions(tolerance=1e-9))
    assert a.converged
    assert abs(a.objective - b.objective) <= 1e-9


def test_different_starts_reach_same_objective(rng):
    d = random_dataset(rng, 60, 5)
    lam = 0.15 * lambda_max(d)
    objs = []
    for _ in range(3):
        fit = fit_lasso(d, lam, SolverOptions(initial_beta=rng.normal(size=5), tolerance=1e-9))
        assert fit.kkt_residual <= 1e-9
        objs.append(fit.objective)
    assert max(objs) - min(objs) <= 1e-9


def test_iteration_cap_is_a_signal(rng):
    d = random_dataset(rng, 50, 5)
    fit = fit_lasso(d, 0.01 * lambda_max(d), SolverOptions(max_iterations=1, newton=False, tolerance=1e-14))
    assert not fit.converged
    assert fit.iterations == 1


def test_argument_errors(rng):
    d = random_dataset(rng, 10, 2)
    with pytest.raises(ValueError):
        fit_lasso(d, -1.0)
    with pytest.raises(ValueError):
        SolverOptions(tolerance=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iterations=0)
    with pytest.raises(ValueError):
        fit_path(d, [0.1, 0.2])


def test_path_warm_equals_cold(rng):
    d = random_dataset(rng, 80, 8)
    tol = 1e-9
    path = fit_path(d, opts=SolverOptions(tolerance=tol), n_points=10, ratio=0.05)
    assert np.all(path[0].beta_hat == 0.0)
    assert path[0].lam == pytest.approx(lambda_max(d))
    for warm in path:
        cold = fit_lasso(d, warm.lam, SolverOptions(tolerance=tol))
        assert np.abs(warm.beta_hat - cold.beta_hat).max() <= 10 * tol


def test_single_point_path(rng):
    d = random_dataset(rng, 30, 3)
    (fit,) = fit_path(d, [lambda_max(d)])
    assert np.all(fit.beta_hat == 0)


def test_support_growth_is_typical(rng):
    d = random_dataset(rng, 120, 10)
    sizes = [f.support.size for f in fit_path(d, n_points=20)]
    pairs = list(zip(sizes, sizes[1:]))
    frac = sum(b >= a for a, b in pairs) / len(pairs)
    assert frac >= 0.9


def test_theoretical_lambda():
    assert theoretical_lambda(100, 50, 1.0, 2.0, 0.01) == pytest.approx(3 * math.sqrt(0.02 * math.log(10000)), rel=1e-15)
    assert theoretical_lambda(100, 50, 1.0, 2.0, 0.01) == pytest.approx(1.287575, abs=1e-5)
    assert theoretical_lambda(400, 50, 1.0, 2.0, 0.01) == pytest.approx(theoretical_lambda(100, 50, 1.0, 2.0, 0.01) / 2)
    near = theoretical_lambda(100, 50, 1.0, 2.0, 1 - 1e-12)
    assert near == pytest.approx(3 * math.sqrt(0.02 * math.log(100)), rel=1e-9)
    for bad in (dict(xi=1.0, eps=0.1), dict(xi=2.0, eps=1.0), dict(xi=2.0, eps=0.0)):
        with pytest.raises(ValueError):
            theoretical_lambda(100, 50, 1.0, **bad)
