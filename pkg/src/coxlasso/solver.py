"""l1-penalized Cox regression by proximal gradient with KKT certification."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .likelihood import _risk_sets, hessian, loss_and_gradient, neg_log_partial_likelihood, gradient


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 50000
    initial_beta: np.ndarray | None = None
    initial_step: float = 1.0
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    # Newton steps on the active set, accepted only when they lower the objective
    newton: bool = True
    accelerated: bool = False
    record_history: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass
class FitResult:
    beta_hat: np.ndarray
    lam: float
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    history: list = field(default_factory=list, repr=False)

    @property
    def support(self):
        return np.flatnonzero(self.beta_hat)

    def to_dict(self):
        return {
            "lambda": self.lam,
            "beta_hat": [float(b) for b in self.beta_hat],
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "shrink": self.shrink,
            "sufficient_decrease": self.sufficient_decrease,
        }


def penalized_objective(d, beta, lam) -> float:
    beta = np.asarray(beta, dtype=float)
    return neg_log_partial_likelihood(d, beta) + lam * float(np.abs(beta).sum())


def _kkt_from_grad(beta, g, lam):
    nz = beta != 0
    r = np.where(nz, np.abs(g + lam * np.sign(beta)), np.maximum(0.0, np.abs(g) - lam))
    return float(r.max()) if r.size else 0.0


def kkt_residual(d, beta, lam) -> float:
    """Largest violation of the lasso optimality conditions at ``beta``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    beta = np.asarray(beta, dtype=float)
    return _kkt_from_grad(beta, gradient(d, beta), lam)


def lambda_max(d) -> float:
    """|grad l(0)|_inf, the smallest penalty with the origin as solution."""
    rs = _risk_sets(d)
    return float(np.abs(gradient(rs, np.zeros(rs.p))).max())


def _newton_step(rs, x, g, lam, F, opts):
    """One damped Newton step on the active set with signs held fixed.

    Returns (x_new, F_new) or None when no decrease is found.
    """
    A = np.flatnonzero(x)
    if A.size == 0:
        return None
    s = np.sign(x[A])
    gA = g[A] + lam * s
    H = hessian(rs, x, cols=A)
    H[np.diag_indices_from(H)] += 1e-12 * max(1.0, float(np.trace(H)) / A.size)
    try:
        step = -np.linalg.solve(H, gA)
    except np.linalg.LinAlgError:
        return None
    slope = float(gA @ step)
    if not slope < 0:
        return None
    t = 1.0
    while t > 1e-10:
        xa = x[A] + t * step
        xa = np.where(np.sign(xa) == s, xa, 0.0)
        xn = x.copy()
        xn[A] = xa
        Fn = neg_log_partial_likelihood(rs, xn) + lam * np.abs(xn).sum()
        if Fn <= F + opts.sufficient_decrease * t * slope and Fn < F:
            return xn, Fn
        t *= opts.shrink
    return None


def _polish(rs, x, loss, g, lam, res, steps=5):
    """Full Newton steps on the final active set, kept only while the KKT
    residual falls and the objective does not rise beyond rounding."""
    A = np.flatnonzero(x)
    if A.size == 0:
        return x, loss, g, res
    s = np.sign(x[A])
    F = loss + lam * np.abs(x).sum()
    for _ in range(steps):
        H = hessian(rs, x, cols=A)
        try:
            step = np.linalg.solve(H, g[A] + lam * s)
        except np.linalg.LinAlgError:
            break
        xn = x.copy()
        xn[A] = x[A] - step
        if np.any(np.sign(xn[A]) != s):
            break
        ln, gn = loss_and_gradient(rs, xn)
        Fn = ln + lam * np.abs(xn).sum()
        rn = _kkt_from_grad(xn, gn, lam)
        if not (rn < res and Fn <= F + 1e-15 * max(1.0, abs(F))):
            break
        x, loss, g, res, F = xn, ln, gn, rn, Fn
    return x, loss, g, res


def fit_lasso(d, lam: float, opts: SolverOptions | None = None) -> FitResult:
    """Minimize l(beta) + lam * |beta|_1.

    Iterates ``x+ = soft_threshold(x - s grad l(x), s lam)`` with a
    backtracking step ``s`` (majorization test), interleaved with
    active-set Newton steps when ``opts.newton``.  Stops once the KKT
    residual drops to ``opts.tolerance``.
    """
    if lam < 0 or not math.isfinite(lam):
        raise ValueError("lambda must be a finite nonnegative number")
    opts = opts or SolverOptions()
    rs = _risk_sets(d)
    x = np.zeros(rs.p) if opts.initial_beta is None else np.array(opts.initial_beta, dtype=float)
    loss, g = loss_and_gradient(rs, x)
    F = loss + lam * np.abs(x).sum()
    step = opts.initial_step
    hist = [F] if opts.record_history else []
    prev_support = None
    y, x_prev, tk = x, x, 1.0  # momentum state for the accelerated variant

    it = 0
    res = _kkt_from_grad(x, g, lam)
    while res > opts.tolerance and it < opts.max_iterations:
        it += 1
        support = tuple(np.flatnonzero(x))
        if opts.newton and not opts.accelerated and support and support == prev_support:
            nw = _newton_step(rs, x, g, lam, F, opts)
            if nw is not None:
                x, F = nw
                loss, g = loss_and_gradient(rs, x)
                res = _kkt_from_grad(x, g, lam)
                if opts.record_history:
                    hist.append(F)
                prev_support = tuple(np.flatnonzero(x))
                continue
        prev_support = support

        base, gb = (x, g) if not opts.accelerated else (y, loss_and_gradient(rs, y)[1])
        lb = loss if not opts.accelerated else neg_log_partial_likelihood(rs, y)
        step = step / opts.shrink
        while True:
            xp = soft_threshold(base - step * gb, step * lam)
            dx = xp - base
            lp, gp = loss_and_gradient(rs, xp)
            if lp <= lb + gb @ dx + (dx @ dx) / (2 * step) + 1e-15 * abs(lb) or step < 1e-20:
                break
            step *= opts.shrink
        Fp = lp + lam * np.abs(xp).sum()
        if opts.accelerated:
            if Fp > F and y is not x:  # restart momentum
                y, tk = x, 1.0
                continue
            t_next = (1 + math.sqrt(1 + 4 * tk * tk)) / 2
            y = xp + ((tk - 1) / t_next) * (xp - x)
            tk = t_next
        x, loss, g, F = xp, lp, gp, Fp
        res = _kkt_from_grad(x, g, lam)
        if opts.record_history:
            hist.append(F)

    if opts.newton and res <= opts.tolerance:
        x, loss, g, res = _polish(rs, x, loss, g, lam, res)
    x = x + 0.0  # no negative zeros in reports
    objective = penalized_objective(rs, x, lam)
    return FitResult(
        beta_hat=x,
        lam=float(lam),
        objective=objective,
        kkt_residual=res,
        iterations=it,
        converged=res <= opts.tolerance,
        shrink=opts.shrink,
        sufficient_decrease=opts.sufficient_decrease,
        history=hist,
    )


def fit_path(d, lambdas=None, opts: SolverOptions | None = None, n_points: int = 20, ratio: float = 0.01):
    """Warm-started fits along a strictly decreasing penalty grid.

    Without ``lambdas`` a geometric grid of ``n_points`` from
    ``lambda_max`` down to ``ratio * lambda_max`` is used.
    """
    opts = opts or SolverOptions()
    if lambdas is None:
        lmax = lambda_max(d)
        lambdas = lmax * np.geomspace(1.0, ratio, n_points) if n_points > 1 else np.array([lmax])
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0) or np.any(np.diff(lambdas) >= 0):
        raise ValueError("grid must be strictly decreasing and nonnegative")
    out = []
    warm = opts.initial_beta
    for lam in lambdas:
        fit = fit_lasso(d, float(lam), replace(opts, initial_beta=warm))
        out.append(fit)
        warm = fit.beta_hat
    return out


def theoretical_lambda(n: int, p: int, K: float, xi: float, eps: float) -> float:
    """Penalty level {(xi+1)/(xi-1)} K sqrt((2/n) log(2p/eps))."""
    if not xi > 1:
        raise ValueError("xi must exceed 1")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    return (xi + 1) / (xi - 1) * K * math.sqrt((2.0 / n) * math.log(2 * p / eps))
