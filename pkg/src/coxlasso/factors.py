"""Cone quantities of a PSD matrix and the scalar equations behind the bounds.

For a support set O of size d_o and aperture xi the cone is
``{b : |b_Oc|_1 <= xi |b_O|_1}``.  All three quotients are scale invariant,
so we work on the normalized slice ``|b_O|_1 = 1``.  Fixing the sign
pattern ``s`` of ``b_O`` turns the slice into a product of a signed simplex
(for ``b_O``) and an l1 ball of radius xi (for ``b_Oc``), both of which
have closed-form Euclidean projections.

* compatibility factor: ``b' S b`` is convex on each piece, so the minimum
  is found exactly by one QP per sign pattern.
* weak cone invertibility factor and restricted eigenvalue: ratio objectives,
  nonconvex; multistart projected gradient plus a random-sampling envelope
  whose best value bounds the infimum from above.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConeSpec:
    support: tuple
    xi: float

    def __post_init__(self):
        sup = tuple(sorted(int(j) for j in self.support))
        if not sup:
            raise ValueError("support must be nonempty")
        if len(set(sup)) != len(sup):
            raise ValueError("support has repeated indices")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        object.__setattr__(self, "support", sup)

    @property
    def d_o(self) -> int:
        return len(self.support)

    def split(self, p):
        O = np.array(self.support, dtype=int)
        if O.max() >= p:
            raise ValueError(f"support index {O.max()} out of range for p={p}")
        Oc = np.setdiff1d(np.arange(p), O)
        return O, Oc

    def contains(self, b, slack=1e-12) -> bool:
        b = np.asarray(b, dtype=float)
        O, Oc = self.split(b.size)
        return np.abs(b[Oc]).sum() <= self.xi * np.abs(b[O]).sum() + slack


@dataclass
class FactorReport:
    value: float
    minimizer: np.ndarray
    method: str
    gap_estimate: float
    quantity: str = ""
    q: float | None = None
    sampled_best: float = math.inf
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "quantity": self.quantity,
            "value": self.value,
            "q": self.q,
            "method": self.method,
            "gap_estimate": self.gap_estimate,
            "sampled_best": self.sampled_best,
            "minimizer": [float(v) for v in self.minimizer],
        }


# ----------------------------------------------------------------------------
# quotients


def _norm_q(b, q):
    if math.isinf(q):
        return np.abs(b).max(axis=-1)
    return (np.abs(b) ** q).sum(axis=-1) ** (1.0 / q)


def compatibility_quotient(sigma, cone: ConeSpec, b) -> float:
    """sqrt(d_o) sqrt(b'Sb) / |b_O|_1."""
    b = np.asarray(b, dtype=float)
    O, _ = cone.split(b.size)
    quad = max(float(b @ sigma @ b), 0.0)
    return math.sqrt(cone.d_o) * math.sqrt(quad) / np.abs(b[O]).sum()


def invertibility_quotient(sigma, cone: ConeSpec, b, q) -> float:
    """d_o^{1/q} b'Sb / (|b_O|_1 |b|_q)."""
    b = np.asarray(b, dtype=float)
    O, _ = cone.split(b.size)
    dq = 1.0 if math.isinf(q) else cone.d_o ** (1.0 / q)
    return dq * float(b @ sigma @ b) / (np.abs(b[O]).sum() * _norm_q(b, q))


def re_quotient(sigma, b) -> float:
    """sqrt(b'Sb) / |b|_2."""
    b = np.asarray(b, dtype=float)
    return math.sqrt(max(float(b @ sigma @ b), 0.0)) / float(np.linalg.norm(b))


# ----------------------------------------------------------------------------
# projections


def project_simplex(v, radius=1.0):
    """Euclidean projection onto {x >= 0, sum x = radius}."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - radius
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_l1_ball(v, radius):
    v = np.asarray(v, dtype=float)
    if v.size == 0 or np.abs(v).sum() <= radius:
        return v.copy()
    if radius <= 0:
        return np.zeros_like(v)
    return np.sign(v) * project_simplex(np.abs(v), radius)


class _Slice:
    """Normalized cone piece for a fixed sign pattern of b_O."""

    def __init__(self, sigma, O, Oc, signs, xi):
        self.S = sigma
        self.O, self.Oc = O, Oc
        self.s = np.asarray(signs, dtype=float)
        self.xi = xi
        self.p = sigma.shape[0]

    def project(self, b):
        out = np.empty_like(b)
        out[self.O] = self.s * project_simplex(self.s * b[self.O])
        out[self.Oc] = project_l1_ball(b[self.Oc], self.xi)
        return out

    def center(self):
        b = np.zeros(self.p)
        b[self.O] = self.s / self.O.size
        return b


def _sign_patterns(d_o):
    # b and -b give the same quotients, so the first sign is fixed to +1
    for tail in itertools.product((1.0, -1.0), repeat=d_o - 1):
        yield np.array((1.0,) + tail)


# ----------------------------------------------------------------------------
# exact compatibility factor


def _qp_polish(sl: _Slice, b):
    """Solve the equality-constrained QP on the face identified by ``b``."""
    S = sl.S
    thr = 1e-10
    F = sl.O[sl.s * b[sl.O] > thr]
    y = b[sl.Oc]
    l1_active = np.abs(y).sum() >= sl.xi * (1 - 1e-9)
    if l1_active:
        Y = sl.Oc[np.abs(y) > thr]
    else:
        Y = sl.Oc
    free = np.concatenate([F, Y]).astype(int)
    rows = []
    rhs = []
    a = np.zeros(free.size)
    a[: F.size] = sl.s[np.searchsorted(sl.O, F)]
    rows.append(a)
    rhs.append(1.0)
    if l1_active and Y.size:
        a = np.zeros(free.size)
        a[F.size:] = np.sign(b[Y])
        rows.append(a)
        rhs.append(sl.xi)
    A = np.array(rows)
    m = A.shape[0]
    kkt = np.zeros((free.size + m, free.size + m))
    kkt[: free.size, : free.size] = 2 * S[np.ix_(free, free)]
    kkt[: free.size, free.size:] = A.T
    kkt[free.size:, : free.size] = A
    sol = np.linalg.lstsq(kkt, np.concatenate([np.zeros(free.size), rhs]), rcond=None)[0]
    out = np.zeros(sl.p)
    out[free] = sol[: free.size]
    # feasibility of the polished point
    if np.any(sl.s * out[sl.O] < -1e-13):
        return None
    if abs(sl.s @ out[sl.O] - 1.0) > 1e-10:
        return None
    if l1_active and np.any(np.sign(out[Y]) * np.sign(b[Y]) < 0):
        return None
    if np.abs(out[sl.Oc]).sum() > sl.xi * (1 + 1e-12):
        return None
    out[sl.O] = sl.s * np.maximum(sl.s * out[sl.O], 0.0)
    return out


def _qp_min(sl: _Slice, lip, start=None, tol=1e-13, max_iter=20000):
    """min b'Sb over one normalized cone piece: FISTA with restart, then face polish."""
    S = sl.S
    b = sl.project(sl.center() if start is None else start)
    if lip <= 0:
        return b, float(b @ S @ b)
    f = float(b @ S @ b)
    y, t = b.copy(), 1.0
    for _ in range(max_iter):
        bn = sl.project(y - (2 * S @ y) / lip)
        fn = float(bn @ S @ bn)
        if fn > f:
            # objective went up: restart momentum from the last iterate
            y, t = b.copy(), 1.0
            bn = sl.project(b - (2 * S @ b) / lip)
            fn = float(bn @ S @ bn)
        step = np.abs(bn - b).max()
        tn = (1 + math.sqrt(1 + 4 * t * t)) / 2
        y = bn + ((t - 1) / tn) * (bn - b)
        b, f, t = bn, fn, tn
        if step <= tol:
            break
    for _ in range(3):
        pol = _qp_polish(sl, b)
        if pol is None:
            break
        fp = float(pol @ S @ pol)
        if fp <= f:
            b, f = pol, fp
        # a few projected-gradient steps from the polished point, in case the
        # face guess was off
        for _ in range(50):
            bn = sl.project(b - (2 * S @ b) / lip)
            fn = float(bn @ S @ bn)
            if fn >= f:
                break
            b, f = bn, fn
    return b, max(f, 0.0)


def _check_psd(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("sigma must be a square matrix")
    if not np.allclose(sigma, sigma.T, atol=1e-10, rtol=1e-8):
        raise ValueError("sigma must be symmetric")
    sigma = (sigma + sigma.T) / 2
    lo = float(np.linalg.eigvalsh(sigma)[0]) if sigma.size else 0.0
    if lo < -1e-8:
        raise ValueError(f"sigma is not PSD (smallest eigenvalue {lo:.3g})")
    return sigma


# ----------------------------------------------------------------------------
# random cone points (sampling envelope)


def sample_cone(p, cone: ConeSpec, size, rng):
    """Random points of the normalized cone slice, mixing dense and sparse draws."""
    O, Oc = cone.split(p)
    B = np.zeros((size, p))
    alpha = rng.choice([0.2, 1.0, 5.0], size=size)[:, None]
    x = rng.gamma(np.broadcast_to(alpha, (size, O.size)))
    x /= x.sum(axis=1, keepdims=True)
    B[:, O] = x * rng.choice([-1.0, 1.0], size=(size, O.size))
    if Oc.size:
        y = rng.laplace(size=(size, Oc.size))
        # sparse draws keep a few coordinates only
        k = rng.integers(1, Oc.size + 1, size=size)
        mask = rng.random((size, Oc.size)) < (k / Oc.size)[:, None]
        sparse = rng.random(size) < 0.5
        y = np.where(sparse[:, None] & ~mask, 0.0, y)
        norm = np.abs(y).sum(axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        radius = cone.xi * rng.random((size, 1)) ** rng.choice([0.25, 1.0, 4.0], size=(size, 1))
        B[:, Oc] = y / norm * radius
    return B


def _sample_values(sigma, cone, quantity, q, n_samples, rng, batch=100_000):
    p = sigma.shape[0]
    O, _ = cone.split(p)
    best, best_b = math.inf, None
    left = int(n_samples)
    while left > 0:
        m = min(batch, left)
        left -= m
        B = sample_cone(p, cone, m, rng)
        quad = np.einsum("ij,jk,ik->i", B, sigma, B)
        quad = np.maximum(quad, 0.0)
        bo = np.abs(B[:, O]).sum(axis=1)
        if quantity == "kappa":
            vals = math.sqrt(cone.d_o) * np.sqrt(quad) / bo
        elif quantity == "fq":
            dq = 1.0 if math.isinf(q) else cone.d_o ** (1.0 / q)
            vals = dq * quad / (bo * _norm_q(B, q))
        else:
            vals = np.sqrt(quad) / np.linalg.norm(B, axis=1)
        i = int(np.argmin(vals))
        if vals[i] < best:
            best, best_b = float(vals[i]), B[i].copy()
    return best, best_b


# ----------------------------------------------------------------------------
# public factor computations


def compatibility_factor(sigma, cone: ConeSpec, n_samples: int = 0, seed: int = 0,
                         exact_max_d: int = 8, n_random_patterns: int = 64) -> FactorReport:
    """Compatibility factor inf sqrt(d_o) sqrt(b'Sb) / |b_O|_1 over the cone.

    Exact (one convex QP per sign pattern of b_O) when d_o <= ``exact_max_d``;
    otherwise QPs over ``n_random_patterns`` random sign patterns.
    """
    sigma = _check_psd(sigma)
    p = sigma.shape[0]
    O, Oc = cone.split(p)
    lip = 2 * max(float(np.linalg.eigvalsh(sigma)[-1]), 0.0)
    rng = np.random.default_rng(seed)
    if cone.d_o <= exact_max_d:
        patterns = list(_sign_patterns(cone.d_o))
        method = "orthant-exact"
    else:
        patterns = [np.concatenate([[1.0], rng.choice([-1.0, 1.0], cone.d_o - 1)]) for _ in range(n_random_patterns)]
        method = "multistart"
    best_f, best_b = math.inf, None
    for s in patterns:
        b, f = _qp_min(_Slice(sigma, O, Oc, s, cone.xi), lip)
        if f < best_f:
            best_f, best_b = f, b
    value = compatibility_quotient(sigma, cone, best_b)
    sampled = math.inf
    if n_samples:
        sampled, sb = _sample_values(sigma, cone, "kappa", None, n_samples, rng)
        if sampled < value:
            value, best_b = sampled, sb
    return FactorReport(value, best_b, method, max(sampled - value, 0.0) if n_samples else math.nan,
                        quantity="kappa", sampled_best=sampled)


def _ratio_and_grad(S, b, quantity, q, O, Oc):
    Sb = S @ b
    f = float(b @ Sb)
    if quantity == "re":
        nn = float(b @ b)
        return f / nn, (2 * Sb * nn - f * 2 * b) / nn**2
    # |b_O|_1 == 1 on the slice, so only |b|_q moves
    N = float(_norm_q(b, q))
    if math.isinf(q):
        j = int(np.argmax(np.abs(b)))
        gN = np.zeros_like(b)
        gN[j] = np.sign(b[j])
    elif q == 1:
        gN = np.sign(b)
    else:
        gN = np.sign(b) * (np.abs(b) / N) ** (q - 1)
    grad = (2 * Sb * N - f * gN) / N**2
    if q == 1:
        # min-norm subgradient at zero coordinates of b_Oc
        z = Oc[b[Oc] == 0]
        c = 2 * Sb[z] * N
        grad[z] = np.sign(c) * np.maximum(np.abs(c) - f, 0.0) / N**2
    return f / N, grad


def _pg_ratio(sl: _Slice, quantity, q, start, max_iter=2000, tol=1e-11):
    """Spectral projected gradient (Barzilai-Borwein steps, Armijo backtracking)."""
    b = sl.project(start)
    val, g = _ratio_and_grad(sl.S, b, quantity, q, sl.O, sl.Oc)
    step = 1.0
    for _ in range(max_iter):
        while True:
            bn = sl.project(b - step * g)
            d = bn - b
            if not np.any(d):
                return b, val
            vn, gn = _ratio_and_grad(sl.S, bn, quantity, q, sl.O, sl.Oc)
            if vn <= val + 1e-4 * float(g @ d) or step < 1e-14:
                break
            step *= 0.5
        if vn > val:
            break
        yk = gn - g
        sy = float(d @ yk)
        step = min(max(float(d @ d) / sy, 1e-10), 1e10) if sy > 0 else 1e3
        done = val - vn <= tol * max(abs(val), 1e-300) and np.abs(d).max() < 1e-9
        b, val, g = bn, vn, gn
        if done:
            break
    return b, val


def _multistart(sigma, cone, quantity, q, starts, n_starts, seed):
    p = sigma.shape[0]
    O, Oc = cone.split(p)
    rng = np.random.default_rng(seed)
    patterns = list(_sign_patterns(cone.d_o)) if cone.d_o <= 8 else [
        np.concatenate([[1.0], rng.choice([-1.0, 1.0], cone.d_o - 1)]) for _ in range(16)
    ]
    jobs = []  # (pattern, start point)
    for s in patterns:
        sl = _Slice(sigma, O, Oc, s, cone.xi)
        jobs.append((s, sl.center()))
        for j in O:
            e = np.zeros(p)
            e[j] = 1.0
            jobs.append((s, e * s[np.searchsorted(O, j)]))
    for b0 in starts or ():
        b0 = np.asarray(b0, dtype=float)
        if b0 is None or not np.any(b0[O]):
            continue
        b0 = b0 / np.abs(b0[O]).sum()
        s = np.where(b0[O] >= 0, 1.0, -1.0)
        if s[0] < 0:
            s, b0 = -s, -b0
        jobs.append((s, b0))
    n_rand = max(n_starts - len(jobs), len(patterns))
    R = sample_cone(p, cone, n_rand, rng)
    for b0 in R:
        s = np.where(b0[O] >= 0, 1.0, -1.0)
        if s[0] < 0:
            s, b0 = -s, -b0
        jobs.append((s, b0))
    best_v, best_b = math.inf, None
    for s, b0 in jobs:
        sl = _Slice(sigma, O, Oc, s, cone.xi)
        b, v = _pg_ratio(sl, quantity, q, b0)
        if v < best_v:
            best_v, best_b = v, b
    return best_b


def weak_cone_invertibility(sigma, cone: ConeSpec, q: float = 2.0, n_samples: int = 0,
                            seed: int = 0, starts=None, n_starts: int = 50) -> FactorReport:
    """Weak cone invertibility factor inf d_o^{1/q} b'Sb / (|b_O|_1 |b|_q)."""
    q = float(q)
    if not (1.0 <= q <= 2.0 or math.isinf(q)):
        raise ValueError("q must lie in [1, 2] or be infinite")
    sigma = _check_psd(sigma)
    starts = list(starts or [])
    if not starts:
        starts.append(compatibility_factor(sigma, cone, seed=seed).minimizer)
    b = _multistart(sigma, cone, "fq", q, starts, n_starts, seed)
    value = invertibility_quotient(sigma, cone, b, q)
    sampled = math.inf
    if n_samples:
        sampled, sb = _sample_values(sigma, cone, "fq", q, n_samples, np.random.default_rng(seed + 1))
        if sampled < value:
            value, b = sampled, sb
    return FactorReport(value, b, "multistart", max(sampled - value, 0.0) if n_samples else math.nan,
                        quantity="F_q", q=q, sampled_best=sampled)


def restricted_eigenvalue(sigma, cone: ConeSpec, n_samples: int = 0, seed: int = 0,
                          starts=None, n_starts: int = 50) -> FactorReport:
    """Restricted eigenvalue inf sqrt(b'Sb) / |b|_2 over the cone."""
    sigma = _check_psd(sigma)
    starts = list(starts or [])
    if not starts:
        starts.append(compatibility_factor(sigma, cone, seed=seed).minimizer)
    b = _multistart(sigma, cone, "re", None, starts, n_starts, seed)
    value = re_quotient(sigma, b)
    sampled = math.inf
    if n_samples:
        sampled, sb = _sample_values(sigma, cone, "re", None, n_samples, np.random.default_rng(seed + 2))
        if sampled < value:
            value, b = sampled, sb
    return FactorReport(value, b, "multistart", max(sampled - value, 0.0) if n_samples else math.nan,
                        quantity="RE", sampled_best=sampled)


@dataclass
class FactorSet:
    """kappa, F_q for several q and RE computed with shared seeds.

    Every optimizer is also started from the other quantities' minimizers,
    so the pointwise relations between the quotients carry over to the
    reported values.
    """

    kappa: FactorReport
    fq: dict
    re: FactorReport

    def phi(self, name, q=None):
        if name == "kappa2":
            return self.kappa.value**2
        if name == "re2":
            return self.re.value**2
        return self.fq[q].value

    def to_dict(self):
        return {
            "kappa": self.kappa.to_dict(),
            "F_q": {str(q): r.to_dict() for q, r in self.fq.items()},
            "RE": self.re.to_dict(),
        }


def all_factors(sigma, cone: ConeSpec, qs=(1.0, 2.0), n_samples: int = 0, seed: int = 0,
                starts=None, n_starts: int = 50) -> FactorSet:
    sigma = _check_psd(sigma)
    extra = [np.asarray(s, dtype=float) for s in (starts or [])]
    kap = compatibility_factor(sigma, cone, n_samples=n_samples, seed=seed)
    re = restricted_eigenvalue(sigma, cone, n_samples=n_samples, seed=seed,
                               starts=[kap.minimizer] + extra, n_starts=n_starts)
    fq = {}
    for q in qs:
        fq[float(q)] = weak_cone_invertibility(
            sigma, cone, q, n_samples=n_samples, seed=seed,
            starts=[kap.minimizer, re.minimizer] + extra, n_starts=n_starts)
    # RE once more from the F_q minimizers
    re2 = restricted_eigenvalue(sigma, cone, n_samples=0, seed=seed,
                                starts=[kap.minimizer, re.minimizer] + [r.minimizer for r in fq.values()] + extra,
                                n_starts=len(fq) + 2)
    if re2.value < re.value:
        re2.sampled_best = re.sampled_best
        re2.gap_estimate = max(re.sampled_best - re2.value, 0.0) if n_samples else math.nan
        re = re2
    return FactorSet(kap, fq, re)


# ----------------------------------------------------------------------------
# scalar equations


def solve_eta(tau: float, tol: float = 1e-14) -> float:
    """Smaller root of eta * exp(-eta) = tau on [0, 1]."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau > math.exp(-1.0):
        raise ValueError(f"tau = {tau} exceeds 1/e; no solution in [0, 1]")
    if tau == 0:
        return 0.0
    if tau == math.exp(-1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid * math.exp(-mid) < tau:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def solve_t_npe(n: int, p: int, eps: float, tol: float = 1e-14) -> float:
    """Positive root t of p(p+1) exp{-n t^2 / (2 + 2t/3)} = eps / 2.221."""
    if n < 1 or p < 1 or not 0 < eps < 1:
        raise ValueError("need n >= 1, p >= 1 and 0 < eps < 1")
    c = math.log(2.221 * p * (p + 1) / eps)

    def h(t):  # increasing in t > 0
        return n * t * t / (2 + 2 * t / 3) - c

    lo, hi = 0.0, 1.0
    while h(hi) < 0:
        lo, hi = hi, 2 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if h(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def theorem3_deduction(d_o, xi, K, n, p, eps, lambda0_at_tstar, r_star) -> float:
    """d_o (xi+1)^2 K^2 {C1 L_n(p(p+1)/eps) + C2 t_{n,p,eps}^2}."""
    C1 = 1.0 + lambda0_at_tstar
    C2 = (2.0 / r_star) * lambda0_at_tstar
    Ln = math.sqrt((2.0 / n) * math.log(p * (p + 1) / eps))
    t = solve_t_npe(n, p, eps)
    return d_o * (xi + 1) ** 2 * K**2 * (C1 * Ln + C2 * t * t)


def theorem3_lower_bound(rho_star, d_o, xi, K, n, p, eps, lambda0_at_tstar, r_star) -> float:
    """Probabilistic lower bound rho_* minus the deduction above."""
    if not xi > 1:
        raise ValueError("xi must exceed 1")
    return rho_star - theorem3_deduction(d_o, xi, K, n, p, eps, lambda0_at_tstar, r_star)


def lemma4_chain(factors: FactorSet, xi: float, sigma) -> dict:
    """Terms of min{kappa^2, (1+xi)^{2/q-1} F_q} >= RE^2 >= lambda_min."""
    lam_min = float(np.linalg.eigvalsh(sigma)[0])
    out = {"kappa2": factors.kappa.value**2, "re2": factors.re.value**2, "lambda_min": lam_min}
    for q, r in factors.fq.items():
        if 1 <= q <= 2:
            out[f"scaled_F{q:g}"] = (1 + xi) ** (2 / q - 1) * r.value
    return out
