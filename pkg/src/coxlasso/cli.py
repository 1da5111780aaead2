"""Command line entry point: ``coxlasso <subcommand> ...``.

Exit status: 0 on success, 1 on data or validation failure (including a
verification run whose checks fail), 2 on argument errors.  Every
successful run writes ``<out>.manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .data import DatasetFormatError, load_dataset, save_dataset, validate_dataset
from .factors import ConeSpec, all_factors, weak_cone_invertibility
from .harness import EXPERIMENTS, _clean, experiment_to_kv, load_experiment, run_experiment, write_report
from .hessians import TruncationSpec, weight_truncated_hessian
from .likelihood import EmptyRiskSetError, gradient, hessian, neg_log_partial_likelihood
from .simulate import BaselineHazard, config_to_kv, load_config, parse_vector, read_kv, simulate_dataset_with_info
from .solver import SolverOptions, fit_lasso, fit_path, lambda_max, theoretical_lambda


class DataError(Exception):
    """Failure attributable to input data; maps to exit status 1."""


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _vector(s, name):
    try:
        return np.array(parse_vector(s), dtype=float)
    except ValueError:
        raise DataError(f"--{name}: expected comma-separated numbers, got {s!r}") from None


def _load(path):
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    try:
        d = load_dataset(path)
    except DatasetFormatError as e:
        raise DataError(f"{path}: {e}") from None
    rep = validate_dataset(d)
    if not rep.ok:
        first = rep.violations[0]
        raise DataError(f"{path}: invalid dataset ({len(rep)} problems; first: {first.kind}: {first.detail})")
    return d


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _manifest(args, outputs, started, seed=None):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    out = outputs[0]
    m = {
        "subcommand": args.command,
        "argv": args._argv,
        "resolved": resolved,
        "seed": seed,
        "artifacts": [{"path": p, "sha256": _sha256(p)} for p in outputs],
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out + ".manifest.json"
    _write(path, _dump(m))
    return path


# ----------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    if not os.path.exists(args.config):
        raise DataError(f"config file not found: {args.config}")
    try:
        cfg = load_config(args.config)
    except ValueError as e:
        raise DataError(f"{args.config}: {e}") from None
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    d, info = simulate_dataset_with_info(cfg, threads=args.threads)
    save_dataset(d, args.out, fmt=args.format)
    args.resolved_config = read_kv(config_to_kv(cfg))
    args.resampled = [list(x) for x in info.resampled]
    return [args.out], cfg.seed


def _fit_report(fit, extra=None):
    r = fit.to_dict()
    r.update(extra or {})
    return r


def cmd_fit(args):
    d = _load(args.dataset)
    if args.theoretical:
        lam = theoretical_lambda(d.n, d.p, d.k_bound, args.xi, args.eps)
    elif args.lam is not None:
        lam = args.lam
    else:
        raise argparse.ArgumentTypeError("fit needs --lambda or --theoretical")
    opts = SolverOptions(tolerance=args.tol, max_iterations=args.max_iter,
                         accelerated=args.accelerated, newton=not args.no_newton)
    fit = fit_lasso(d, lam, opts)
    rep = _fit_report(fit, {"dataset": args.dataset, "lambda_max": lambda_max(d),
                            "lambda_rule": "theoretical" if args.theoretical else "given"})
    _write(args.out, _dump(rep))
    return [args.out], None


def cmd_path(args):
    d = _load(args.dataset)
    opts = SolverOptions(tolerance=args.tol, max_iterations=args.max_iter)
    if args.grid:
        fits = fit_path(d, _vector(args.grid, "grid"), opts)
    else:
        fits = fit_path(d, None, opts, n_points=args.auto, ratio=args.ratio)
    rep = {"dataset": args.dataset, "lambda_max": lambda_max(d),
           "fits": [f.to_dict() | {"support_size": int(f.support.size)} for f in fits]}
    _write(args.out, _dump(rep))
    return [args.out], None


def _read_matrix(path):
    if not os.path.exists(path):
        raise DataError(f"matrix file not found: {path}")
    try:
        rows = [[float(x) for x in line.split()] for line in open(path, encoding="utf-8") if line.strip()]
        m = np.array(rows, dtype=float)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"{path}: matrix must be square")
    return m


def cmd_factors(args):
    source = {}
    if args.sigma:
        sigma = _read_matrix(args.sigma)
        source["sigma_file"] = args.sigma
    else:
        if not (args.dataset and args.beta):
            raise argparse.ArgumentTypeError("factors needs --sigma or both --dataset and --beta")
        d = _load(args.dataset)
        beta = _vector(args.beta, "beta")
        if beta.size != d.p:
            raise DataError(f"--beta has {beta.size} entries, dataset has p={d.p}")
        if args.tstar is not None:
            base = BaselineHazard()
            if args.config:
                base = load_config(args.config).baseline
            spec = TruncationSpec(args.tstar, args.mcap if args.mcap is not None else math.inf, base)
            sigma = weight_truncated_hessian(d, beta, spec)
            source["matrix"] = "weight-truncated compensated Hessian"
            source.update({"t_star": args.tstar, "m_cap": spec.m_cap, "baseline": base.kind})
        else:
            sigma = hessian(d, beta)
            source["matrix"] = "Hessian at beta"
    support = [int(j) for j in _vector(args.support, "support")]
    try:
        cone = ConeSpec(tuple(support), args.xi)
        cone.split(sigma.shape[0])
        qs = tuple(args.q) if args.q else (1.0, 2.0)
        fs = all_factors(sigma, cone, qs=tuple(q for q in qs if not math.isinf(q)),
                         n_samples=args.samples, seed=args.seed, n_starts=args.starts)
        out = fs.to_dict()
        for q in qs:
            if math.isinf(q):
                out["F_q"]["inf"] = weak_cone_invertibility(sigma, cone, q, n_samples=args.samples,
                                                            seed=args.seed, n_starts=args.starts).to_dict()
    except ValueError as e:
        raise DataError(str(e)) from None
    out.update({"support": list(cone.support), "xi": cone.xi, "source": source,
                "lambda_min": float(np.linalg.eigvalsh(sigma)[0])})
    _write(args.out, _dump(out))
    return [args.out], args.seed


def cmd_loglik(args):
    d = _load(args.dataset)
    beta = _vector(args.beta, "beta")
    if beta.size != d.p:
        raise DataError(f"--beta has {beta.size} entries, dataset has p={d.p}")
    rep = {"loss": neg_log_partial_likelihood(d, beta), "gradient": gradient(d, beta),
           "hessian": hessian(d, beta), "n": d.n, "p": d.p, "events": int(d.event_times.size)}
    text = _dump(rep)
    if args.out:
        _write(args.out, text)
        return [args.out], None
    sys.stdout.write(text)
    return [], None


def cmd_verify(args):
    if not os.path.exists(args.config):
        raise DataError(f"config file not found: {args.config}")
    try:
        cfg = load_experiment(args.config)
    except ValueError as e:
        raise DataError(f"{args.config}: {e}") from None
    from dataclasses import replace

    if args.reps is not None:
        cfg = replace(cfg, reps=args.reps)
    if args.seed is not None:
        cfg = replace(cfg, sim=cfg.sim.with_seed(args.seed))
    report = run_experiment(args.experiment, cfg, threads=args.threads)
    paths = write_report(report, args.out)
    args.resolved_config = read_kv(experiment_to_kv(cfg))
    args.passed = report.passed
    return paths, cfg.sim.seed


def cmd_replay(args):
    """Re-run a recorded command and compare artifact hashes with the record."""
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            m = json.load(fh)
        argv, recorded = m["argv"], m["artifacts"]
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read manifest {args.manifest}: {e}") from None
    code = main(argv)
    if code not in (0, 1):
        return code
    mismatched = [a["path"] for a in recorded if not os.path.exists(a["path"]) or _sha256(a["path"]) != a["sha256"]]
    for path in mismatched:
        print(f"coxlasso replay: {path} differs from the recorded artifact", file=sys.stderr)
    return 1 if mismatched else code


# ----------------------------------------------------------------------------
# parser


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="coxlasso", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="subcommand")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    s = add("simulate", cmd_simulate, "simulate a dataset from a key = value config file")
    s.add_argument("--config", required=True, help="simulation config file")
    s.add_argument("--out", required=True, help="dataset file to write")
    s.add_argument("--format", choices=("text", "json"), default="text", help="dataset file format")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--threads", type=int, default=1, help="worker threads")

    s = add("fit", cmd_fit, "fit the lasso at one penalty level")
    s.add_argument("--dataset", required=True, help="dataset file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--lambda", dest="lam", type=float, default=None, help="penalty level")
    g.add_argument("--theoretical", action="store_true", help="use the theoretical penalty level")
    s.add_argument("--xi", type=float, default=2.0, help="cone aperture for --theoretical")
    s.add_argument("--eps", type=float, default=0.05, help="error probability for --theoretical")
    s.add_argument("--tol", type=float, default=1e-8, help="KKT residual tolerance")
    s.add_argument("--max-iter", type=int, default=50000, help="iteration cap")
    s.add_argument("--accelerated", action="store_true", help="use momentum (non-monotone)")
    s.add_argument("--no-newton", action="store_true", help="disable active-set Newton steps")
    s.add_argument("--out", required=True, help="report file (JSON)")
    s.add_argument("--threads", type=int, default=1, help="worker threads (unused; accepted for uniformity)")

    s = add("path", cmd_path, "fit a warm-started regularization path")
    s.add_argument("--dataset", required=True, help="dataset file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", default=None, help="strictly decreasing comma-separated penalty levels")
    g.add_argument("--auto", type=int, default=None, help="number of geometric grid points from lambda_max")
    s.add_argument("--ratio", type=float, default=0.01, help="smallest/largest penalty for --auto")
    s.add_argument("--tol", type=float, default=1e-8, help="KKT residual tolerance")
    s.add_argument("--max-iter", type=int, default=50000, help="iteration cap")
    s.add_argument("--out", required=True, help="report file (JSON)")
    s.add_argument("--threads", type=int, default=1, help="worker threads (unused; accepted for uniformity)")

    s = add("factors", cmd_factors, "compatibility, invertibility and restricted eigenvalue factors")
    s.add_argument("--sigma", default=None, help="matrix file: one row per line, space separated")
    s.add_argument("--dataset", default=None, help="dataset file (matrix = Hessian at --beta)")
    s.add_argument("--beta", default=None, help="comma-separated coefficient vector")
    s.add_argument("--support", required=True, help="comma-separated 0-based support indices")
    s.add_argument("--xi", type=float, required=True, help="cone aperture")
    s.add_argument("--q", type=float, action="append", default=None, help="F_q order (repeatable; inf allowed)")
    s.add_argument("--tstar", type=float, default=None, help="truncation time (weight-truncated matrix)")
    s.add_argument("--mcap", type=float, default=None, help="weight cap M for --tstar")
    s.add_argument("--config", default=None, help="simulation config supplying the baseline for --tstar")
    s.add_argument("--samples", type=int, default=1_000_000, help="sampling envelope size")
    s.add_argument("--starts", type=int, default=50, help="multistart count for F_q and RE")
    s.add_argument("--seed", type=int, default=0, help="seed for starts and sampling")
    s.add_argument("--out", required=True, help="report file (JSON)")
    s.add_argument("--threads", type=int, default=1, help="worker threads (unused; accepted for uniformity)")

    s = add("loglik", cmd_loglik, "negative log partial likelihood, gradient and Hessian")
    s.add_argument("--dataset", required=True, help="dataset file")
    s.add_argument("--beta", required=True, help="comma-separated coefficient vector")
    s.add_argument("--out", default=None, help="report file (JSON); stdout when omitted")
    s.add_argument("--threads", type=int, default=1, help="worker threads (unused; accepted for uniformity)")

    s = add("verify", cmd_verify, "run a Monte Carlo verification experiment")
    s.add_argument("--experiment", required=True, choices=EXPERIMENTS, help="experiment name")
    s.add_argument("--config", required=True, help="experiment config file (key = value)")
    s.add_argument("--reps", type=int, default=None, help="override the config replication count")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.add_argument("--out", required=True, help="report file (JSON); the CSV table goes next to it")
    s.add_argument("--threads", type=int, default=1, help="worker threads")

    s = add("replay", cmd_replay, "re-run the command recorded in a manifest")
    s.add_argument("--manifest", required=True, help="manifest file written by an earlier run")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    args._argv = argv
    if getattr(args, "threads", 1) < 1:
        print("coxlasso: --threads must be >= 1", file=sys.stderr)
        return 2
    started = time.time()
    try:
        result = args.func(args)
        if args.command == "replay":
            return result
        outputs, seed = result
    except argparse.ArgumentTypeError as e:
        print(f"coxlasso {args.command}: {e}", file=sys.stderr)
        return 2
    except (DataError, EmptyRiskSetError, OSError) as e:
        print(f"coxlasso {args.command}: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"coxlasso {args.command}: {e}", file=sys.stderr)
        return 1
    if outputs:
        _manifest(args, outputs, started, seed)
    return 0 if getattr(args, "passed", True) else 1


if __name__ == "__main__":
    sys.exit(main())
