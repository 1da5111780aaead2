"""Truncated Hessian family and its population counterpart.

With w_i(s) = Y_i(s) min{M, exp(Z_i(s)'beta)} (M = inf for no cap), all
compensated matrices have the form

    int_0^{t*} (1/n) sum_i w_i(s) {Z_i(s) - m(s)}^{x2} dLambda0(s)

for some step function m: the sample weighted mean (compensated and
weight-truncated Hessians) or a population mean estimated on an auxiliary
sample.  Paths, weights and m are constant between change points, so the
integral is a finite sum of Lambda0 increments; it is evaluated exactly.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .likelihood import _risk_sets, hessian
from .simulate import BaselineHazard, SimConfig, derive_seed, simulate_subjects


@dataclass(frozen=True)
class TruncationSpec:
    t_star: float
    m_cap: float = math.inf
    baseline: BaselineHazard | None = None

    def __post_init__(self):
        if not self.t_star > 0:
            raise ValueError("t_star must be positive")
        if not self.m_cap > 0:
            raise ValueError("m_cap must be positive")


def truncated_hessian(d, beta0, t_star) -> np.ndarray:
    """(1/n) sum over events at times <= t_star of V_n(t, beta0)."""
    return hessian(_risk_sets(d).restrict(t_star), beta0)


def _segments(subjects, t_star):
    """Pieces (lo, hi] of each at-risk interval cut at path breakpoints and t_star."""
    los, his, rows = [], [], []
    for s in subjects:
        a, e = s.at_risk_start, min(s.at_risk_end, t_star)
        if e <= a:
            continue
        bp = s.path.breakpoints
        inner = bp[(bp > a) & (bp < e)]
        cuts = np.concatenate([[a], inner, [e]])
        los.append(cuts[:-1])
        his.append(cuts[1:])
        rows.append(s.path.at(cuts[1:]))
    if not rows:
        return np.empty(0), np.empty(0), None
    return np.concatenate(los), np.concatenate(his), np.concatenate(rows)


def _weights(Z, beta, cap):
    eta = Z @ beta
    if math.isinf(cap):
        return np.exp(eta)
    return np.minimum(cap, np.exp(np.minimum(eta, 700.0)))


def _mean_step(lo, hi, Z, w, t_star):
    """Weighted mean sum w Z / sum w as a step function on a grid.

    Returns (grid, mu, s0) with mu[k], s0[k] the values on (grid[k], grid[k+1]].
    """
    grid = np.unique(np.concatenate([[0.0, t_star], lo, hi]))
    k_lo = np.searchsorted(grid, lo)
    k_hi = np.searchsorted(grid, hi)
    m = grid.size
    d0 = np.bincount(k_lo, w, minlength=m) - np.bincount(k_hi, w, minlength=m)
    d1 = np.zeros((m, Z.shape[1]))
    np.add.at(d1, k_lo, w[:, None] * Z)
    np.add.at(d1, k_hi, -w[:, None] * Z)
    s0 = np.cumsum(d0)[:-1]
    s1 = np.cumsum(d1, axis=0)[:-1]
    pos = s0 > 1e-300 * max(1.0, float(np.abs(w).max(initial=0.0)))
    mu = np.zeros_like(s1)
    mu[pos] = s1[pos] / s0[pos, None]
    return grid, mu, np.where(pos, s0, 0.0)


def _integrate_spread(lo, hi, Z, w, grid, mu, baseline):
    """sum over pieces of int_(lo,hi] w (Z - mu(s))^{x2} dLambda0(s)."""
    p = Z.shape[1]
    Lam = baseline.cumulative
    d_lam = np.asarray(Lam(hi)) - np.asarray(Lam(lo))
    S2 = (Z * (w * d_lam)[:, None]).T @ Z

    Lg = np.asarray(Lam(grid), dtype=float)
    dLg = np.diff(Lg)
    Mg = np.vstack([np.zeros(p), np.cumsum(mu * dLg[:, None], axis=0)])
    K = dLg.size

    def locate(t):
        k = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, K - 1)
        return k, np.asarray(Lam(t)) - Lg[k]

    k_lo, e_lo = locate(lo)
    k_hi, e_hi = locate(hi)
    m_int = (Mg[k_hi] + mu[k_hi] * e_hi[:, None]) - (Mg[k_lo] + mu[k_lo] * e_lo[:, None])
    cross = (Z * w[:, None]).T @ m_int

    # sum_j c_j Q(t_j) with Q(t) = int_0^t mu mu' dLambda0, via suffix sums
    c = np.concatenate([w, -w])
    kk = np.concatenate([k_hi, k_lo])
    ee = np.concatenate([e_hi, e_lo])
    tot = np.bincount(kk, c, minlength=K)
    after = tot.sum() - np.cumsum(tot)  # sum of c_j with k_j > i
    quad = (mu * (after * dLg)[:, None]).T @ mu
    mk = mu[kk]
    quad += (mk * (c * ee)[:, None]).T @ mk
    out = S2 - cross - cross.T + quad
    return (out + out.T) / 2


def _baseline(spec: TruncationSpec, baseline):
    b = baseline if baseline is not None else spec.baseline
    if b is None:
        raise ValueError("a baseline hazard is required (TruncationSpec.baseline or argument)")
    return b


def weight_truncated_hessian(d, beta0, spec: TruncationSpec, baseline: BaselineHazard | None = None) -> np.ndarray:
    """int_0^{t*} G_hat_n(s; M) dLambda0(s) with capped weights min{M, exp(Z'beta0)}."""
    base = _baseline(spec, baseline)
    beta0 = np.asarray(beta0, dtype=float)
    lo, hi, Z = _segments(d.subjects, spec.t_star)
    if Z is None:
        return np.zeros((d.p, d.p))
    w = _weights(Z, beta0, spec.m_cap)
    grid, mu, _ = _mean_step(lo, hi, Z, w, spec.t_star)
    return _integrate_spread(lo, hi, Z, w, grid, mu, base) / d.n


def compensated_hessian(d, beta0, spec: TruncationSpec, baseline: BaselineHazard | None = None) -> np.ndarray:
    """int_0^{t*} V_n(s, beta0) R_n(s, beta0) dLambda0(s); the cap in ``spec`` is ignored."""
    uncapped = TruncationSpec(spec.t_star, math.inf, _baseline(spec, baseline))
    return weight_truncated_hessian(d, beta0, uncapped)


@dataclass
class PopulationSigma:
    sigma: np.ndarray
    se: np.ndarray
    rho_star: float
    r_star: float
    r_star_se: float
    lambda0_t_star: float
    reps: int
    aux_size: int

    def to_dict(self):
        return {
            "sigma": self.sigma.tolist(),
            "se": self.se.tolist(),
            "rho_star": self.rho_star,
            "r_star": self.r_star,
            "r_star_se": self.r_star_se,
            "lambda0_t_star": self.lambda0_t_star,
            "reps": self.reps,
            "aux_size": self.aux_size,
        }


def population_sigma(cfg: SimConfig, spec: TruncationSpec, reps: int, threads: int = 1,
                     aux_factor: int | None = None) -> PopulationSigma:
    """Monte Carlo estimate of Sigma(t*; M) = E int_0^{t*} G_n(s; M) dLambda0(s).

    The population mean mu(t; M) comes from an auxiliary sample of
    ``aux_factor * n`` subjects (default ``reps * n``); the integral is then
    averaged over ``reps`` independent replications of size n.  Also
    estimates r_* = E Y(t*) min{M, exp(Z(t*)'beta0)} from the auxiliary sample.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    base = cfg.baseline if spec.baseline is None else spec.baseline
    beta = cfg.beta
    t_star, cap = spec.t_star, spec.m_cap
    n_aux = (aux_factor or reps) * cfg.n

    aux_cfg = cfg.with_seed(derive_seed(cfg.seed, 1))
    aux = simulate_subjects(aux_cfg, range(n_aux), threads=threads)
    lo, hi, Z = _segments(aux, t_star)
    if Z is None:
        zero = np.zeros((cfg.p, cfg.p))
        return PopulationSigma(zero, zero, 0.0, 0.0, 0.0, float(base.cumulative(t_star)), reps, n_aux)
    w = _weights(Z, beta, cap)
    grid, mu, _ = _mean_step(lo, hi, Z, w, t_star)

    # r_*: Y(t*) min{M, exp(Z(t*)'beta)} per auxiliary subject
    r_vals = np.zeros(n_aux)
    for i, s in enumerate(aux):
        if s.at_risk_start < t_star <= s.at_risk_end:
            r_vals[i] = _weights(s.path.at(t_star)[None, :], beta, cap)[0]

    def one(r):
        rc = cfg.with_seed(derive_seed(cfg.seed, 2, r))
        subs = simulate_subjects(rc, range(cfg.n))
        a, b, X = _segments(subs, t_star)
        if X is None:
            return np.zeros((cfg.p, cfg.p))
        return _integrate_spread(a, b, X, _weights(X, beta, cap), grid, mu, base) / cfg.n

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            mats = list(ex.map(one, range(reps)))
    else:
        mats = [one(r) for r in range(reps)]
    stack = np.stack(mats)
    sigma = stack.mean(axis=0)
    sigma = (sigma + sigma.T) / 2
    se = stack.std(axis=0, ddof=1) / math.sqrt(reps)
    return PopulationSigma(
        sigma=sigma,
        se=se,
        rho_star=float(np.linalg.eigvalsh(sigma)[0]),
        r_star=float(r_vals.mean()),
        r_star_se=float(r_vals.std(ddof=1) / math.sqrt(n_aux)) if n_aux > 1 else 0.0,
        lambda0_t_star=float(base.cumulative(t_star)),
        reps=reps,
        aux_size=n_aux,
    )
