"""Counting-process survival data: covariate paths, subjects, datasets.

A subject is at risk on ``(at_risk_start, at_risk_end]`` and has at most one
event.  Covariates are left-continuous step functions so that they are
predictable: the value on ``(b[k-1], b[k]]`` is ``values[k]``.

Two on-disk formats are supported, a line-oriented text format::

    n=2 p=1 K=1.0
    subject 0 risk=0.0,2.5 event=1.25
    seg 0.0 0.3
    seg 1.0 -0.1
    subject 1 risk=0.0,3.0 event=none
    seg 0.0 0.2

and a JSON document with the same field names.  Floats are written with
``repr`` so both formats round-trip bit-exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DimensionError(DatasetFormatError):
    pass


def _frozen_array(x, ndim):
    a = np.array(x, dtype=float)
    if ndim == 2 and a.ndim == 1:
        a = a.reshape(1, -1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CovariatePath:
    """Left-continuous piecewise-constant covariate process t -> Z(t)."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = _frozen_array(self.breakpoints, 1).reshape(-1)
        bp.setflags(write=False)
        vals = _frozen_array(self.values, 2)
        if vals.shape[0] != bp.size + 1:
            raise ValueError(
                f"need {bp.size + 1} value rows for {bp.size} breakpoints, got {vals.shape[0]}"
            )
        if bp.size > 1 and np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value):
        return cls(np.empty(0), np.atleast_2d(np.asarray(value, dtype=float)))

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def at(self, t):
        """Vectorized evaluation; ``t`` may be a scalar or an array of times."""
        idx = np.searchsorted(self.breakpoints, t, side="left")
        return self.values[idx]

    def __eq__(self, other):
        if not isinstance(other, CovariatePath):
            return NotImplemented
        return np.array_equal(self.breakpoints, other.breakpoints) and np.array_equal(
            self.values, other.values
        )

    __hash__ = None


def covariate_at(path: CovariatePath, t: float) -> np.ndarray:
    """Value of the path on the interval containing ``t`` from the left."""
    return path.at(float(t))


@dataclass(frozen=True)
class Subject:
    at_risk_start: float
    at_risk_end: float
    event_time: Optional[float]
    path: CovariatePath

    @property
    def has_event(self) -> bool:
        return self.event_time is not None

    def at_risk(self, t):
        t = np.asarray(t, dtype=float)
        return (self.at_risk_start < t) & (t <= self.at_risk_end)


@dataclass(frozen=True)
class Dataset:
    subjects: tuple
    p: int
    k_bound: float

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def event_order(self) -> np.ndarray:
        """Indices of subjects with events, sorted by event time."""
        idx = [i for i, s in enumerate(self.subjects) if s.event_time is not None]
        times = np.array([self.subjects[i].event_time for i in idx], dtype=float)
        return np.asarray(idx, dtype=int)[np.argsort(times, kind="stable")]

    @cached_property
    def event_times(self) -> np.ndarray:
        return np.array([self.subjects[i].event_time for i in self.event_order], dtype=float)

    @cached_property
    def risk_sets(self):
        """Stacked risk-set snapshots at every event time (see :mod:`coxlasso.likelihood`)."""
        from .likelihood import compile_event_risk_sets

        return compile_event_risk_sets(self)


# ----------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    subjects: tuple
    detail: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self):
        return [v.kind for v in self.violations]

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


def _path_eval_points(paths: Sequence[CovariatePath]) -> np.ndarray:
    """Times hitting every inter-breakpoint interval of every path on t >= 0."""
    bps = [p.breakpoints for p in paths if p.breakpoints.size]
    if not bps:
        return np.array([0.0])
    allbp = np.unique(np.concatenate(bps))
    allbp = allbp[allbp > 0]
    last = allbp[-1] if allbp.size else 0.0
    return np.concatenate([[0.0], allbp, [last + 1.0]])


def validate_dataset(d: Dataset, pairwise: bool = False) -> ValidationReport:
    """Report every violated data invariant; an empty report means valid.

    With ``pairwise=True`` the covariate bound is checked in its pairwise form
    ``|Z_ij(t) - Z_i'j(t)| <= K`` instead of the per-coordinate ``K/2`` bound.
    """
    rep = ValidationReport()
    half = d.k_bound / 2.0
    good_paths = []
    for i, s in enumerate(d.subjects):
        if s.path.p != d.p:
            rep.violations.append(
                Violation("dimension", (i,), f"path has p={s.path.p}, dataset declares p={d.p}")
            )
            continue
        good_paths.append(s.path)
        if not (s.at_risk_start >= 0 and s.at_risk_start <= s.at_risk_end):
            rep.violations.append(
                Violation(
                    "interval", (i,), f"bad at-risk interval ({s.at_risk_start}, {s.at_risk_end}]"
                )
            )
        if s.event_time is not None and not (s.at_risk_start < s.event_time <= s.at_risk_end):
            rep.violations.append(
                Violation(
                    "event_outside_risk",
                    (i,),
                    f"event {s.event_time} not in ({s.at_risk_start}, {s.at_risk_end}]",
                )
            )
        if not np.all(np.isfinite(s.path.values)):
            rep.violations.append(Violation("nonfinite", (i,), "non-finite covariate value"))
        elif not pairwise:
            worst = float(np.max(np.abs(s.path.values))) if s.path.values.size else 0.0
            if worst > half:
                rep.violations.append(
                    Violation("bound", (i,), f"|Z| reaches {worst} > K/2 = {half}")
                )

    times = {}
    for i, s in enumerate(d.subjects):
        if s.event_time is not None:
            times.setdefault(s.event_time, []).append(i)
    for t, who in sorted(times.items()):
        if len(who) > 1:
            rep.violations.append(Violation("tie", tuple(who), f"{len(who)} events at t={t}"))

    if pairwise and good_paths and all(np.all(np.isfinite(p.values)) for p in good_paths):
        pts = _path_eval_points(good_paths)
        vals = np.stack([p.at(pts) for p in good_paths])  # (n, T, p)
        spread = float(np.max(vals.max(axis=0) - vals.min(axis=0)))
        if spread > d.k_bound:
            rep.violations.append(
                Violation("pairwise_bound", (), f"pairwise spread {spread} > K = {d.k_bound}")
            )
    return rep


# ----------------------------------------------------------------------------
# I/O


def _fmt(x) -> str:
    return repr(float(x))


def _parse_float(tok, line, name):
    try:
        return float(tok)
    except ValueError:
        raise DatasetFormatError(f"cannot parse {tok!r} as a number", line=line, field=name) from None


def dataset_to_text(d: Dataset) -> str:
    out = [f"n={d.n} p={d.p} K={_fmt(d.k_bound)}"]
    for i, s in enumerate(d.subjects):
        ev = "none" if s.event_time is None else _fmt(s.event_time)
        out.append(f"subject {i} risk={_fmt(s.at_risk_start)},{_fmt(s.at_risk_end)} event={ev}")
        lows = [s.at_risk_start] + list(s.path.breakpoints)
        for lo, row in zip(lows, s.path.values):
            out.append("seg " + " ".join([_fmt(lo)] + [_fmt(v) for v in row]))
    return "\n".join(out) + "\n"


def _header_fields(line, lineno):
    fields = {}
    for tok in line.split():
        if "=" not in tok:
            raise DatasetFormatError(f"malformed header token {tok!r}", line=lineno)
        k, v = tok.split("=", 1)
        fields[k] = v
    for k in ("n", "p", "K"):
        if k not in fields:
            raise DatasetFormatError("header missing key", line=lineno, field=k)
    try:
        n, p = int(fields["n"]), int(fields["p"])
    except ValueError:
        raise DatasetFormatError("n and p must be integers", line=lineno) from None
    return n, p, _parse_float(fields["K"], lineno, "K")


def dataset_from_text(text: str) -> Dataset:
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DatasetFormatError("empty file")
    n, p, K = _header_fields(lines[0][1], lines[0][0])
    subjects = []
    cur = None

    def finish():
        if cur is None:
            return
        if not cur["segs"]:
            raise DatasetFormatError("subject has no covariate segments", line=cur["line"])
        bps = [lo for lo, _ in cur["segs"][1:]]
        vals = [v for _, v in cur["segs"]]
        try:
            path = CovariatePath(np.array(bps, dtype=float), np.array(vals, dtype=float).reshape(len(vals), p))
        except ValueError as e:
            raise DatasetFormatError(str(e), line=cur["line"]) from None
        subjects.append(Subject(cur["start"], cur["end"], cur["event"], path))

    for lineno, ln in lines[1:]:
        toks = ln.split()
        if toks[0] == "subject":
            finish()
            kv = dict(t.split("=", 1) for t in toks[2:] if "=" in t)
            if "risk" not in kv or "event" not in kv:
                raise DatasetFormatError("subject line needs risk= and event=", line=lineno)
            parts = kv["risk"].split(",")
            if len(parts) != 2:
                raise DatasetFormatError("risk must be start,end", line=lineno, field="risk")
            start = _parse_float(parts[0], lineno, "risk")
            end = _parse_float(parts[1], lineno, "risk")
            ev = None if kv["event"] == "none" else _parse_float(kv["event"], lineno, "event")
            cur = {"line": lineno, "start": start, "end": end, "event": ev, "segs": []}
        elif toks[0] == "seg":
            if cur is None:
                raise DatasetFormatError("seg line before any subject", line=lineno)
            if len(toks) - 2 != p:
                raise DimensionError(
                    f"expected p={p} covariates, found {len(toks) - 2}", line=lineno
                )
            lo = _parse_float(toks[1], lineno, "t_lo")
            vals = [_parse_float(tok, lineno, f"v_{j + 1}") for j, tok in enumerate(toks[2:])]
            cur["segs"].append((lo, vals))
        else:
            raise DatasetFormatError(f"unknown record type {toks[0]!r}", line=lineno)
    finish()
    if len(subjects) != n:
        raise DatasetFormatError(f"header declares n={n} but file has {len(subjects)} subjects")
    return Dataset(tuple(subjects), p, K)


def dataset_to_json(d: Dataset) -> str:
    doc = {
        "n": d.n,
        "p": d.p,
        "K": float(d.k_bound),
        "subjects": [
            {
                "id": i,
                "risk": [float(s.at_risk_start), float(s.at_risk_end)],
                "event": None if s.event_time is None else float(s.event_time),
                "segments": [
                    {"t_lo": float(lo), "values": [float(v) for v in row]}
                    for lo, row in zip([s.at_risk_start] + list(s.path.breakpoints), s.path.values)
                ],
            }
            for i, s in enumerate(d.subjects)
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def dataset_from_json(text: str) -> Dataset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(e.msg, line=e.lineno) from None
    try:
        n, p, K = int(doc["n"]), int(doc["p"]), float(doc["K"])
        raw = doc["subjects"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"bad document header: {e}") from None
    subjects = []
    for i, rec in enumerate(raw):
        segs = rec["segments"]
        for k, sg in enumerate(segs):
            if len(sg["values"]) != p:
                raise DimensionError(
                    f"subject {i} segment {k}: expected p={p} covariates, found {len(sg['values'])}"
                )
            for j, v in enumerate(sg["values"]):
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise DatasetFormatError(
                        f"subject {i} segment {k}: non-numeric covariate {v!r}", field=f"v_{j + 1}"
                    )
        path = CovariatePath(
            np.array([sg["t_lo"] for sg in segs[1:]], dtype=float),
            np.array([sg["values"] for sg in segs], dtype=float).reshape(len(segs), p),
        )
        ev = rec["event"]
        subjects.append(
            Subject(float(rec["risk"][0]), float(rec["risk"][1]), None if ev is None else float(ev), path)
        )
    if len(subjects) != n:
        raise DatasetFormatError(f"header declares n={n} but document has {len(subjects)} subjects")
    return Dataset(tuple(subjects), p, K)


def _is_json_path(path) -> bool:
    return str(path).lower().endswith(".json")


def save_dataset(d: Dataset, destination, fmt: str | None = None) -> None:
    """Write ``d`` to ``destination``; JSON if ``fmt == 'json'`` or the name ends in ``.json``."""
    fmt = fmt or ("json" if _is_json_path(destination) else "text")
    text = dataset_to_json(d) if fmt == "json" else dataset_to_text(d)
    Path(destination).write_text(text)


def load_dataset(source) -> Dataset:
    text = Path(source).read_text()
    if text.lstrip().startswith("{"):
        return dataset_from_json(text)
    return dataset_from_text(text)


def pairwise_spread(d: Dataset) -> float:
    """max over subject pairs, t >= 0 and coordinates of |Z_ij(t) - Z_i'j(t)|."""
    if d.n < 2:
        return 0.0
    paths = [s.path for s in d.subjects]
    pts = _path_eval_points(paths)
    vals = np.stack([p.at(pts) for p in paths])
    return float(np.max(vals.max(axis=0) - vals.min(axis=0)))


