"""Negative log partial likelihood, its derivatives and risk-set moments.

Everything is evaluated on a *stacked snapshot*: for each of K sorted times
the covariates of the subjects at risk at that time are stacked into one
``(M, p)`` array, blocks contiguous.  Per-block reductions then use
``np.add.reduceat``.  Time-dependent covariates rule out the usual running
suffix sums, so the snapshot is rebuilt per time point; it costs O(n) rows
per event, which is fine at the sizes this package targets.

Weights are stabilized by subtracting the per-block maximum of Z'beta before
exponentiation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, _path_eval_points


class EmptyRiskSetError(ValueError):
    def __init__(self, time):
        self.time = time
        super().__init__(f"empty risk set (or event subject not at risk) at t={time!r}")


@dataclass(frozen=True)
class Snapshots:
    """Covariates of at-risk subjects stacked over a sorted list of times."""

    n: int
    p: int
    times: np.ndarray  # (K,)
    Z: np.ndarray  # (M, p)
    who: np.ndarray  # (M,) subject index of each row
    block: np.ndarray  # (M,) time index of each row
    starts: np.ndarray  # (K,) first row of each block
    sizes: np.ndarray  # (K,)
    event_row: np.ndarray | None = None  # (K,) row of the event subject

    @property
    def K(self) -> int:
        return self.times.size

    def restrict(self, upto: float) -> "Snapshots":
        """Blocks with time <= ``upto``."""
        k = int(np.searchsorted(self.times, upto, side="right"))
        if k == self.K:
            return self
        m = int(self.starts[k]) if k < self.K else self.Z.shape[0]
        return Snapshots(
            self.n, self.p, self.times[:k], self.Z[:m], self.who[:m], self.block[:m],
            self.starts[:k], self.sizes[:k],
            None if self.event_row is None else self.event_row[:k],
        )


def compile_snapshots(d: Dataset, times) -> Snapshots:
    """Stack Z_i(t) over subjects with Y_i(t) = 1 for each t in sorted ``times``."""
    times = np.asarray(times, dtype=float)
    rows, blocks, whos = [], [], []
    for i, s in enumerate(d.subjects):
        lo = np.searchsorted(times, s.at_risk_start, side="right")
        hi = np.searchsorted(times, s.at_risk_end, side="right")
        if hi <= lo:
            continue
        ks = np.arange(lo, hi)
        rows.append(s.path.at(times[lo:hi]))
        blocks.append(ks)
        whos.append(np.full(ks.size, i))
    if rows:
        Z = np.concatenate(rows)
        block = np.concatenate(blocks)
        who = np.concatenate(whos)
        order = np.lexsort((who, block))
        Z, block, who = Z[order], block[order], who[order]
    else:
        Z = np.empty((0, d.p))
        block = np.empty(0, dtype=int)
        who = np.empty(0, dtype=int)
    sizes = np.bincount(block, minlength=times.size)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    return Snapshots(d.n, d.p, times, Z, who, block, starts, sizes)


@dataclass(frozen=True)
class SortedRiskSets:
    """Risk sets as suffixes of an end-time ordering.

    Valid when every covariate path is constant and all subjects share one
    risk start: the risk set at an event time t is then {i : end_i >= t},
    and all per-event sums reduce to cumulative sums in O(n p^2).
    """

    n: int
    p: int
    times: np.ndarray  # (K,) event times, increasing
    Z: np.ndarray  # (n, p) covariates ordered by end time
    first: np.ndarray  # (K,) first row of each risk set
    event_row: np.ndarray  # (K,) row of the event subject

    @property
    def K(self) -> int:
        return self.times.size

    def restrict(self, upto: float) -> "SortedRiskSets":
        k = int(np.searchsorted(self.times, upto, side="right"))
        if k == self.K:
            return self
        return SortedRiskSets(self.n, self.p, self.times[:k], self.Z, self.first[:k], self.event_row[:k])


def _sorted_eligible(d: Dataset) -> bool:
    if d.n == 0:
        return False
    s0 = d.subjects[0].at_risk_start
    return all(s.at_risk_start == s0 and s.path.breakpoints.size == 0 for s in d.subjects)


def compile_event_risk_sets(d: Dataset):
    order = d.event_order
    times = d.event_times
    if times.size and np.any(np.diff(times) == 0):
        t = times[np.flatnonzero(np.diff(times) == 0)[0]]
        raise ValueError(f"tied event times at t={t!r}; ties are not supported")
    if _sorted_eligible(d):
        ends = np.array([s.at_risk_end for s in d.subjects])
        srt = np.argsort(ends, kind="stable")
        rank = np.empty(d.n, dtype=int)
        rank[srt] = np.arange(d.n)
        Z = np.vstack([s.path.values[0] for s in d.subjects])[srt]
        first = np.searchsorted(ends[srt], times, side="left")
        ev = rank[order]
        if times.size and (np.any(times <= d.subjects[0].at_risk_start) or np.any(ends[order] < times)):
            raise EmptyRiskSetError(float(times[0]))
        return SortedRiskSets(d.n, d.p, times, Z, first, ev)
    snap = compile_snapshots(d, times)
    key = snap.block.astype(np.int64) * max(d.n, 1) + snap.who
    want = np.arange(times.size, dtype=np.int64) * max(d.n, 1) + order
    pos = np.searchsorted(key, want)
    ok = (pos < key.size) & (key[np.minimum(pos, key.size - 1)] == want) if key.size else np.zeros(want.size, bool)
    if not np.all(ok):
        raise EmptyRiskSetError(float(times[np.flatnonzero(~ok)[0]]))
    return Snapshots(snap.n, snap.p, snap.times, snap.Z, snap.who, snap.block, snap.starts, snap.sizes, pos)


def _risk_sets(d):
    return d if isinstance(d, (Snapshots, SortedRiskSets)) else d.risk_sets


def _suffix_parts(rs: SortedRiskSets, beta):
    """Log normalizers and weighted means at each event, from reversed cumsums."""
    eta = rs.Z @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    s0 = np.cumsum(w[::-1])[::-1][rs.first]
    s1 = np.cumsum((w[:, None] * rs.Z)[::-1], axis=0)[::-1][rs.first]
    return eta, shift, w, s0, s1 / s0[:, None]


def _suffix_safe(rs: SortedRiskSets, beta):
    # a shared shift works only while no risk set underflows entirely
    eta = rs.Z @ beta
    return eta.max() - eta.min() < 600.0


def _sorted_loss_grad(rs: SortedRiskSets, beta, want_loss=True):
    eta, shift, w, s0, zbar = _suffix_parts(rs, beta)
    g = -(rs.Z[rs.event_row] - zbar).sum(axis=0) / rs.n
    if not want_loss:
        return None, g
    loss = float(-np.sum(eta[rs.event_row] - shift - np.log(s0)) / rs.n)
    return loss, g


def _sorted_hessian(rs: SortedRiskSets, beta, cols=None):
    _, _, w, s0, zbar = _suffix_parts(rs, beta)
    # sum_e S2(t_e)/S0(t_e) = sum_j w_j Z_j Z_j' c_j, c_j = sum_{e: first_e <= j} 1/S0(t_e)
    c = np.cumsum(np.bincount(rs.first, 1.0 / s0, minlength=rs.n))
    Z = rs.Z if cols is None else rs.Z[:, cols]
    zb = zbar if cols is None else zbar[:, cols]
    H = (Z * (w * c)[:, None]).T @ Z - zb.T @ zb
    return (H + H.T) / 2.0 / rs.n


def _as_snapshots(rs: SortedRiskSets) -> Snapshots:
    """Equivalent stacked snapshots (used when weights would underflow)."""
    sizes = rs.n - rs.first
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    who = np.concatenate([np.arange(f, rs.n) for f in rs.first]) if rs.K else np.empty(0, dtype=int)
    block = np.repeat(np.arange(rs.K), sizes)
    return Snapshots(rs.n, rs.p, rs.times, rs.Z[who], who, block, starts, sizes,
                     starts + (rs.event_row - rs.first))


def _dispatch(d, beta):
    """Risk sets to evaluate on: sorted form when safe, stacked snapshots otherwise."""
    rs = _risk_sets(d)
    if isinstance(rs, SortedRiskSets) and not _suffix_safe(rs, beta):
        rs = _as_snapshots(rs)
    return rs


def _block_weights(rs: Snapshots, beta, cap=None):
    """Stabilized per-row weights, per-block log-normalizer and block sums.

    With ``cap`` the raw weights are min(cap, exp(Z'beta)); no stabilization
    is needed then since they are bounded.
    """
    eta = rs.Z @ beta
    if cap is not None:
        w = np.minimum(cap, np.exp(np.minimum(eta, 700.0)))
        shift = np.zeros(rs.K)
    else:
        shift = np.maximum.reduceat(eta, rs.starts) if rs.K else np.zeros(0)
        w = np.exp(eta - shift[rs.block])
    s = np.add.reduceat(w, rs.starts) if rs.K else np.zeros(0)
    return eta, shift, w, s


def _block_means(rs, w, s):
    return np.add.reduceat(w[:, None] * rs.Z, rs.starts, axis=0) / s[:, None]


def neg_log_partial_likelihood(d, beta) -> float:
    """l(beta) = -C(beta; inf) / n, summing over event times only."""
    beta = np.asarray(beta, dtype=float)
    rs = _dispatch(d, beta)
    if rs.K == 0:
        return 0.0
    if isinstance(rs, SortedRiskSets):
        return _sorted_loss_grad(rs, beta)[0]
    eta, shift, w, s = _block_weights(rs, beta)
    return float(-np.sum(eta[rs.event_row] - shift - np.log(s)) / rs.n)


def gradient(d, beta) -> np.ndarray:
    """-(1/n) sum over events of (Z_event - Zbar_n(t_event, beta))."""
    beta = np.asarray(beta, dtype=float)
    rs = _dispatch(d, beta)
    if rs.K == 0:
        return np.zeros(rs.p)
    if isinstance(rs, SortedRiskSets):
        return _sorted_loss_grad(rs, beta, want_loss=False)[1]
    _, _, w, s = _block_weights(rs, beta)
    zbar = _block_means(rs, w, s)
    return -(rs.Z[rs.event_row] - zbar).sum(axis=0) / rs.n


def loss_and_gradient(d, beta):
    beta = np.asarray(beta, dtype=float)
    rs = _dispatch(d, beta)
    if rs.K == 0:
        return 0.0, np.zeros(rs.p)
    if isinstance(rs, SortedRiskSets):
        return _sorted_loss_grad(rs, beta)
    eta, shift, w, s = _block_weights(rs, beta)
    zbar = _block_means(rs, w, s)
    loss = float(-np.sum(eta[rs.event_row] - shift - np.log(s)) / rs.n)
    return loss, -(rs.Z[rs.event_row] - zbar).sum(axis=0) / rs.n


def _weighted_covariance_sum(rs: Snapshots, w, s, cols=None, scale=None):
    """sum_k scale_k * V_k, with V_k the block-weighted covariance (centered form)."""
    Z = rs.Z if cols is None else rs.Z[:, cols]
    zbar = np.add.reduceat(w[:, None] * Z, rs.starts, axis=0) / s[:, None]
    C = Z - zbar[rs.block]
    wn = w / s[rs.block]
    if scale is not None:
        wn = wn * scale[rs.block]
    H = (C * wn[:, None]).T @ C
    return (H + H.T) / 2.0


def hessian(d, beta, cols=None) -> np.ndarray:
    """(1/n) sum over events of V_n(t_event, beta); ``cols`` restricts to a sub-block."""
    beta = np.asarray(beta, dtype=float)
    rs = _dispatch(d, beta)
    m = rs.p if cols is None else len(cols)
    if rs.K == 0:
        return np.zeros((m, m))
    if isinstance(rs, SortedRiskSets):
        return _sorted_hessian(rs, beta, cols)
    _, _, w, s = _block_weights(rs, beta)
    return _weighted_covariance_sum(rs, w, s, cols) / rs.n


def bregman_divergence(d, beta1, beta2) -> float:
    """Symmetric Bregman divergence (beta1 - beta2)'(grad l(beta1) - grad l(beta2))."""
    beta1 = np.asarray(beta1, dtype=float)
    beta2 = np.asarray(beta2, dtype=float)
    return float((beta1 - beta2) @ (gradient(d, beta1) - gradient(d, beta2)))


def eta_b(d: Dataset, b) -> float:
    """max over s >= 0 and subject pairs of |b'Z_i(s) - b'Z_j(s)|.

    Paths are step functions, so evaluating at one point of every
    inter-breakpoint interval is exact.
    """
    b = np.asarray(b, dtype=float)
    if d.n < 2 or not np.any(b):
        return 0.0
    paths = [s.path for s in d.subjects]
    pts = _path_eval_points(paths)
    proj = np.stack([p.values[np.searchsorted(p.breakpoints, pts, side="left")] @ b for p in paths])
    return float(np.max(proj.max(axis=0) - proj.min(axis=0)))


@dataclass(frozen=True)
class RiskSetMoments:
    s0: float
    s1: np.ndarray
    s2: np.ndarray
    zbar: np.ndarray
    v: np.ndarray
    r: float


def risk_set_moments(d: Dataset, t: float, beta) -> RiskSetMoments:
    beta = np.asarray(beta, dtype=float)
    Z = np.array([s.path.at(t) for s in d.subjects if s.at_risk_start < t <= s.at_risk_end])
    if Z.size == 0:
        raise EmptyRiskSetError(float(t))
    eta = Z @ beta
    shift = eta.max()
    w = np.exp(eta - shift)
    sw = w.sum()
    zbar = w @ Z / sw
    C = Z - zbar
    v = (C * (w / sw)[:, None]).T @ C
    v = (v + v.T) / 2.0
    scale = np.exp(shift) / d.n
    s0 = float(sw * scale)
    s1 = (w @ Z) * scale
    s2 = (Z * w[:, None]).T @ Z * scale
    return RiskSetMoments(s0=s0, s1=s1, s2=s2, zbar=zbar, v=v, r=s0)
