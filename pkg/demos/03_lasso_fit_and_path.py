"""
Lasso fits and regularization paths
===================================

Fit the penalized estimator at one penalty level, certify it through the
KKT residual, and follow a warm-started path down from lambda_max.
"""

# %%
import numpy as np

from coxlasso.simulate import SimConfig, simulate_dataset
from coxlasso.solver import SolverOptions, fit_lasso, fit_path, kkt_residual, lambda_max, theoretical_lambda

cfg = SimConfig(n=300, p=20, beta_true=(1.5, -1.5, 1.0) + (0.0,) * 17, covariate_law="piecewise", seed=3)
d = simulate_dataset(cfg)

lam = 0.3 * lambda_max(d)
fit = fit_lasso(d, lam, SolverOptions(tolerance=1e-10))
print(f"lambda={lam:.4f}  converged={fit.converged}  iterations={fit.iterations}")
print("KKT residual:", kkt_residual(d, fit.beta_hat, lam))
print("support:", fit.support, "coefficients:", np.round(fit.beta_hat[fit.support], 3))

# %%
# The path starts at lambda_max, where the zero vector is optimal.
path = fit_path(d, n_points=12, ratio=0.02)
for f in path:
    print(f"  lambda={f.lam:.4f}  |support|={f.support.size:2d}  objective={f.objective:.5f}")

# %%
# The penalty level used by the probabilistic bounds is much larger than
# lambda_max at this sample size, so the fit there is exactly zero.
lt = theoretical_lambda(d.n, d.p, d.k_bound, xi=2.0, eps=0.05)
print(f"theoretical lambda {lt:.3f} vs lambda_max {lambda_max(d):.3f}")
print("nonzero at theoretical lambda:", np.count_nonzero(fit_lasso(d, lt).beta_hat))
