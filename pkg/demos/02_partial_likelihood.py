"""
Partial likelihood, gradient and Hessian
========================================

Evaluate the negative log partial likelihood on a two-subject example where
every quantity has a closed form, then on simulated data.
"""

# %%
import math

import numpy as np

from coxlasso.data import CovariatePath, Dataset, Subject
from coxlasso.likelihood import (
    bregman_divergence,
    eta_b,
    gradient,
    hessian,
    neg_log_partial_likelihood,
    risk_set_moments,
)
from coxlasso.simulate import SimConfig, simulate_dataset

# Subject 1 (Z=1) fails at t=1 while subject 2 (Z=0) is still at risk.
two = Dataset(
    (Subject(0.0, 1.0, 1.0, CovariatePath.constant([1.0])),
     Subject(0.0, 2.0, None, CovariatePath.constant([0.0]))),
    p=1,
    k_bound=1.0,
)
print("loss at 0:", neg_log_partial_likelihood(two, [0.0]), "=", math.log(2) / 2)
print("gradient: ", gradient(two, [0.0])[0], "= -1/4")
print("Hessian:  ", hessian(two, [0.0])[0, 0], "= 1/8")
m = risk_set_moments(two, 0.5, [0.0])
print("risk-set mean and variance at t=0.5:", m.zbar, m.v)

# %%
# On simulated data the symmetric Bregman divergence is sandwiched by the
# Hessian quadratic form, with factors set by the oscillation eta_b.
d = simulate_dataset(SimConfig(n=200, p=4, beta_true=(1.0, 0.0, -1.0, 0.0), covariate_law="piecewise", seed=1))
rng = np.random.default_rng(0)
beta, b = rng.normal(size=4) * 0.5, rng.normal(size=4) * 0.5
quad = b @ hessian(d, beta) @ b
e = eta_b(d, b)
ds = bregman_divergence(d, beta + b, beta)
print(f"{math.exp(-e) * quad:.5f} <= D = {ds:.5f} <= {math.exp(e) * quad:.5f}")
