"""Acceptance criteria 1-11 at their stated sizes and tolerances.

Each test prints one ``criterion NN: PASS|FAIL`` line; the lines are
repeated in the pytest terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest

from coxlasso.cli import main
from coxlasso.factors import ConeSpec, all_factors, compatibility_factor, lemma4_chain, restricted_eigenvalue
from coxlasso.factors import solve_eta, solve_t_npe
from coxlasso.harness import ExperimentConfig, check_lemma2, experiment_to_kv, run_experiment
from coxlasso.likelihood import eta_b, gradient, hessian, neg_log_partial_likelihood
from coxlasso.simulate import SimConfig, config_to_kv
from coxlasso.solver import SolverOptions, fit_lasso, kkt_residual, lambda_max

import oracles
from conftest import record_acceptance
from oracles import constant_dataset, random_dataset


def _rng(k):
    return np.random.default_rng([2024, k])


# ----------------------------------------------------------------------------
# 1. derivative correctness


def test_c01_derivatives():
    rng = _rng(1)
    t0 = time.time()
    worst_g = worst_h = 0.0
    min_eig = math.inf
    for i in range(50):
        n, p = int(rng.integers(20, 101)), int(rng.integers(1, 11))
        d = random_dataset(rng, n, p, K=float(rng.uniform(0.5, 2.0)), left_truncation=i % 2 == 1)
        for _ in range(4):
            beta = rng.normal(size=p)
            g = gradient(d, beta)
            fd = oracles.fd_gradient(lambda b: neg_log_partial_likelihood(d, b), beta)
            worst_g = max(worst_g, np.abs(g - fd).max() / max(np.abs(g).max(), 1e-3))
            H = hessian(d, beta)
            fdH = oracles.fd_jacobian(lambda b: gradient(d, b), beta)
            worst_h = max(worst_h, np.abs(H - fdH).max() / max(np.abs(H).max(), 1e-3))
            min_eig = min(min_eig, float(np.linalg.eigvalsh(H)[0]))
    dt = time.time() - t0
    ok = worst_g <= 1e-6 and worst_h <= 1e-5 and min_eig >= -1e-10 and dt < 60
    record_acceptance(1, ok, f"grad rel err {worst_g:.1e}, Hessian rel err {worst_h:.1e}, "
                             f"min eig {min_eig:.1e}, {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 2. solver optimality


def test_c02_solver():
    rng = _rng(2)
    t0 = time.time()
    gap = kkt = 0.0
    zero_ok = True
    for i in range(20):
        d = constant_dataset(rng, 30, 2, K=2.0) if i % 2 else random_dataset(rng, 30, 2, K=2.0, jumps=1.0)
        lmax = lambda_max(d)
        lam = float(rng.uniform(0.05, 0.8)) * lmax
        fit = fit_lasso(d, lam, SolverOptions(tolerance=1e-10))
        _, best = oracles.grid_search_p2(d, lam)
        gap = max(gap, fit.objective - best)
        kkt = max(kkt, kkt_residual(d, fit.beta_hat, lam))
        for big in (lmax, 1.5 * lmax):
            zero_ok &= bool(np.all(fit_lasso(d, big).beta_hat == 0.0))
    newton = 0.0
    for _ in range(3):
        d = random_dataset(rng, 400, 3, K=2.0, jumps=0.5)
        fit = fit_lasso(d, 0.0, SolverOptions(tolerance=1e-11))
        newton = max(newton, float(np.abs(fit.beta_hat - oracles.newton_mple(d)).max()))
    dt = time.time() - t0
    ok = gap <= 1e-8 and kkt <= 1e-8 and zero_ok and newton <= 1e-6 and dt < 120
    record_acceptance(2, ok, f"objective - grid oracle {gap:.1e}, KKT {kkt:.1e}, zero above lambda_max "
                             f"{zero_ok}, Newton distance {newton:.1e}, {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 3. Bregman and Hessian sandwich


def test_c03_sandwich():
    rng = _rng(3)
    t0 = time.time()
    bad, eta_err, pairs = 0, 0.0, 0
    for i in range(40):
        d = random_dataset(rng, int(rng.integers(10, 60)), int(rng.integers(1, 6)), K=float(rng.uniform(0.5, 2)),
                          left_truncation=i % 3 == 0)
        for _ in range(5):
            beta = rng.normal(size=d.p)
            b = rng.normal(size=d.p) * rng.uniform(0.1, 3.0)
            v, vals = check_lemma2(d, beta, b)
            e = oracles.eta_b_bruteforce(d, b)
            eta_err = max(eta_err, abs(vals["eta_b"] - e))
            # independent evaluation of both sandwiches with the brute-force oscillation
            H, H1 = hessian(d, beta), hessian(d, beta + b)
            quad = b @ H @ b
            ds = (gradient(d, beta + b) - gradient(d, beta)) @ b
            ind = (ds < math.exp(-e) * quad - 1e-10 or ds > math.exp(e) * quad + 1e-10
                   or np.linalg.eigvalsh(H1 - math.exp(-2 * e) * H)[0] < -1e-10
                   or np.linalg.eigvalsh(math.exp(2 * e) * H - H1)[0] < -1e-10)
            bad += bool(v) or ind
            pairs += 1
    dt = time.time() - t0
    ok = bad == 0 and pairs == 200 and eta_err <= 1e-12 and dt < 60
    record_acceptance(3, ok, f"{bad} violations in {pairs} pairs, eta_b error {eta_err:.1e}, {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 4 and 5. basic inequality, cone membership and oracle inequalities


MAIN_SIM = SimConfig(n=200, p=50, beta_true=(3.0, -3.0, 3.0) + (0.0,) * 47, k_bound=1.0, censor_rate=0.3,
                     covariate_law="piecewise", seed=1)


@pytest.fixture(scope="module")
def main_run():
    cfg = ExperimentConfig(sim=MAIN_SIM, reps=500, xi=5.0, lambda_rule="fixed", lam=0.09, count_qualifying=True,
                           max_reps=2000, envelope_samples=2000, n_starts=20)
    t0 = time.time()
    rep = run_experiment("theorem1", cfg)
    return rep, time.time() - t0


@pytest.fixture(scope="module")
def applicable_run():
    sim = SimConfig(n=10000, p=3, beta_true=(1.0, 0.0, 0.0), k_bound=1.0, seed=3)
    cfg = ExperimentConfig(sim=sim, reps=100, xi=3.0, lambda_rule="oracle", lambda_factor=1.0, tolerance=1e-10,
                           envelope_samples=2000, n_starts=20)
    return run_experiment("theorem1", cfg)


def test_c04_basic_inequality_and_cone(main_run):
    rep, dt = main_run
    nq = rep.notes["qualifying"]
    counts = rep.violation_counts
    bad = sum(counts.get(k, 0) for k in ("lemma1_left", "lemma1_right", "cone", "solver_not_converged"))
    ok = nq >= 500 and bad == 0 and dt < 600
    record_acceptance(4, ok, f"{nq} qualifying of {rep.replications} replications, {bad} violations, {dt:.0f}s")
    assert ok


def test_c05_oracle_inequalities(main_run, applicable_run):
    rep, _ = main_run
    main_viol = sum(v for k, v in rep.violation_counts.items() if k.startswith("theorem1_"))
    sup = applicable_run
    sup_viol = sum(v for k, v in sup.violation_counts.items() if k.startswith("theorem1_"))
    sup_other = sum(v for k, v in sup.violation_counts.items() if not k.startswith("theorem1_"))
    ok = main_viol == 0 and sup_viol == 0 and sup_other == 0 and sup.notes["checked"] > 0
    record_acceptance(
        5, ok,
        f"main run: {rep.notes['checked']} checked, {rep.notes['inapplicable_tau_above_1_over_e']} inapplicable "
        f"(median tau {rep.notes['tau_median']:.1f}), {main_viol} violations; n=10000 run: "
        f"{sup.notes['checked']} checked of {sup.notes['qualifying']} qualifying "
        f"(max tau {max(r.tau for r in sup.records if r.qualifies):.2f}), {sup_viol} violations")
    assert ok


# ----------------------------------------------------------------------------
# 6. factor algebra


def _cross(S, cone, qs, other, n_starts=10):
    starts = [other.kappa.minimizer, other.re.minimizer, *(r.minimizer for r in other.fq.values())]
    return all_factors(S, cone, qs=qs, starts=starts, n_starts=n_starts)


def _phis(fs):
    out = {"kappa2": fs.kappa.value**2, "re2": fs.re.value**2}
    out.update({f"F{q:g}": r.value for q, r in fs.fq.items()})
    return out


def test_c06_factor_algebra():
    rng = _rng(6)
    t0 = time.time()
    qs = (1.0, 1.5, 2.0)
    worst = {"i": 0.0, "ii": 0.0, "iii": 0.0}
    for _ in range(100):
        p = int(rng.integers(3, 9))
        d_o = int(rng.integers(1, min(3, p - 1) + 1))
        xi = float(rng.choice([1.5, 2.0, 3.0]))
        cone = ConeSpec(tuple(rng.choice(p, size=d_o, replace=False)), xi)
        A = rng.normal(size=(p, int(rng.integers(1, p + 1))))
        S = A @ A.T / A.shape[1]
        # singular draws put every factor at roundoff level, so relative errors are floored at eps-scale of |S|
        floor = 1e-9 * np.linalg.norm(S, 2)
        fs = all_factors(S, cone, qs=qs, n_starts=20)
        ch = lemma4_chain(fs, xi, S)
        re2 = ch["re2"]
        top = min(v for k, v in ch.items() if k not in ("re2", "lambda_min"))
        worst["i"] = max(worst["i"], (re2 - top) / max(top, floor), (ch["lambda_min"] - re2) / max(re2, floor))

        # (ii) entrywise perturbation that keeps positive semidefiniteness
        B = A + rng.normal(scale=0.1, size=A.shape)
        Sb = B @ B.T / B.shape[1]
        fb = _cross(Sb, cone, qs, fs)
        fa = _cross(S, cone, qs, fb)
        ded = d_o * (xi + 1) ** 2 * np.abs(Sb - S).max()
        pa, pb = _phis(fa), _phis(fb)
        for k in pa:
            lhs, rhs = pb[k], min(pa[k], _phis(fs)[k]) - ded
            worst["ii"] = max(worst["ii"], (rhs - lhs) / max(abs(rhs), floor))

        # (iii) adding a positive semidefinite increment
        C = rng.normal(size=(p, 2)) * 0.3
        Sc = S + C @ C.T
        fc = _cross(Sc, cone, qs, fs)
        fa = _cross(S, cone, qs, fc)
        pa, pc = _phis(fa), _phis(fc)
        for k in pa:
            base = min(pa[k], _phis(fs)[k])
            worst["iii"] = max(worst["iii"], (base - pc[k]) / max(base, floor))

    ident = 0.0
    for p in range(3, 9):
        cone = ConeSpec(tuple(range(min(3, p - 1))), 2.0)
        ident = max(ident, abs(compatibility_factor(np.eye(p), cone).value - 1),
                    abs(restricted_eigenvalue(np.eye(p), cone).value - 1))
    dt = time.time() - t0
    ok = max(worst.values()) <= 1e-3 and ident <= 1e-6 and dt < 300
    record_acceptance(6, ok, f"worst relative excess (i) {worst['i']:.1e}, (ii) {worst['ii']:.1e}, "
                             f"(iii) {worst['iii']:.1e}; identity error {ident:.1e}; {dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------------
# 7. martingale tail


def test_c07_gradient_tail():
    sim = SimConfig(n=200, p=20, beta_true=(1.0, -1.0) + (0.0,) * 18, k_bound=1.0, censor_rate=0.3,
                    covariate_law="piecewise", seed=7)
    t0 = time.time()
    rep = run_experiment("lemma3", ExperimentConfig(sim=sim, reps=2000, t_star=1.0))
    dt = time.time() - t0
    rows = [r for r in rep.tail_table if r["quantity"] == "gradient_sup"]
    others = [r for r in rep.tail_table if r["quantity"] != "gradient_sup"]
    excess = max(r["frequency"] - r["bound"] - 3 * r["se"] for r in rows)
    ok = len(rows) == 10 and all(r["ok"] for r in rows) and all(r["ok"] for r in others) and dt < 300
    record_acceptance(7, ok, f"{sum(r['ok'] for r in rows)}/10 gradient points within bound "
                             f"(max excess {excess:.3f}), Hessian-integrand rows ok: "
                             f"{all(r['ok'] for r in others)}, {dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------------
# 8. V-statistic tail


def test_c08_vstat_tail():
    t0 = time.time()
    rows = []
    for kernel in ("linear", "mixed"):
        sim = SimConfig(n=1, p=1, beta_true=(0.0,), seed=8)
        rep = run_experiment("lemma5", ExperimentConfig(sim=sim, reps=5000, vstat_n=100, kernel=kernel))
        rows += [dict(r, kernel=kernel) for r in rep.tail_table]
    dt = time.time() - t0
    signs = {r["quantity"] for r in rows}
    nonzero_minus = any(r["frequency"] > 0 for r in rows if r["quantity"] == "V_minus")
    ok = all(r["ok"] for r in rows) and signs == {"V_plus", "V_minus"} and nonzero_minus and dt < 120
    record_acceptance(8, ok, f"{sum(r['ok'] for r in rows)}/{len(rows)} points within bound "
                             f"(linear and mixed kernels, both signs), {dt:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 9. restricted eigenvalue lower bound


def test_c09_theorem3():
    sim = SimConfig(n=300, p=12, beta_true=(1.0, -1.0) + (0.0,) * 10, k_bound=1.0, covariate_law="piecewise",
                    seed=9)
    cfg = ExperimentConfig(sim=sim, reps=200, xi=2.0, eps=0.05, t_star=1.0, m_cap=2.0, pop_reps=50,
                           envelope_samples=2000, n_starts=20)
    t0 = time.time()
    rep = run_experiment("theorem3", cfg)
    dt = time.time() - t0
    n = rep.notes
    orders = sum(rep.violation_counts.get(k, 0) for k in ("order_truncation", "order_weight_cap"))
    ok = rep.passed and orders == 0 and dt < 900
    record_acceptance(9, ok, f"failure frequency {n['failure_frequency']:.3f} <= {n['allowance_3eps']:.3f}, "
                             f"ordering violations {orders}, lower bound {n['lower_bound']:.3g} "
                             f"(rho_* {n['rho_star']:.3g}, vacuous {n['vacuous']}), {dt:.0f}s")
    assert ok


# ----------------------------------------------------------------------------
# 10. scalar solvers


def test_c10_scalar_solvers():
    t0 = time.time()
    res_eta = max(abs(e * math.exp(-e) - tau) for tau in np.linspace(0, math.exp(-1), 201)
                  for e in [solve_eta(float(tau))])
    res_t = 0.0
    for n, p, eps in ((100, 10, 0.05), (300, 12, 0.05), (10**4, 50, 0.01), (50, 200, 0.5)):
        t = solve_t_npe(n, p, eps)
        target = eps / 2.221
        res_t = max(res_t, abs(p * (p + 1) * math.exp(-n * t * t / (2 + 2 * t / 3)) - target) / target)
    exact = solve_eta(math.exp(-1)) == 1.0 and solve_eta(0.0) == 0.0
    dt = time.time() - t0
    ok = res_eta <= 1e-10 and res_t <= 1e-10 and exact and dt < 1
    record_acceptance(10, ok, f"eta residual {res_eta:.1e}, t residual {res_t:.1e} (relative), "
                              f"endpoints exact {exact}, {dt * 1000:.0f}ms")
    assert ok


# ----------------------------------------------------------------------------
# 11. CLI determinism


def test_c11_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    sim = SimConfig(n=120, p=6, beta_true=(1.0, -1.0, 0.0, 0.0, 0.0, 0.0), covariate_law="piecewise",
                    censor_rate=0.2, seed=11)
    (tmp_path / "sim.cfg").write_text(config_to_kv(sim))
    exp = ExperimentConfig(sim=sim, reps=6, lambda_rule="oracle", lambda_factor=1.5, envelope_samples=500,
                           n_starts=5, pop_reps=4, pilot_reps=4, directions=2, vstat_n=50)
    (tmp_path / "exp.cfg").write_text(experiment_to_kv(exp))
    np.savetxt(tmp_path / "S.txt", np.diag([2.0, 1.0, 0.5]) + 0.1)
    assert main(["simulate", "--config", "sim.cfg", "--out", "d.txt"]) == 0
    commands = [
        ["simulate", "--config", "sim.cfg", "--out", "{o}.txt"],
        ["fit", "--dataset", "d.txt", "--lambda", "0.05", "--out", "{o}.json"],
        ["path", "--dataset", "d.txt", "--auto", "6", "--out", "{o}.json"],
        ["factors", "--sigma", "S.txt", "--support", "0", "--xi", "2", "--samples", "5000", "--out", "{o}.json"],
        ["factors", "--dataset", "d.txt", "--beta", "1,-1,0,0,0,0", "--support", "0,1", "--xi", "2",
         "--tstar", "0.7", "--mcap", "2", "--config", "sim.cfg", "--samples", "2000", "--starts", "5",
         "--out", "{o}.json"],
        ["loglik", "--dataset", "d.txt", "--beta", "1,-1,0,0,0,0", "--out", "{o}.json"],
    ]
    for exp_name in ("lemma1", "lemma2", "lemma3", "lemma5", "theorem1", "theorem2", "theorem3", "corollary1"):
        commands.append(["verify", "--experiment", exp_name, "--config", "exp.cfg", "--out", "{o}.json"])
    failures = []
    for i, cmd in enumerate(commands):
        outs = {}
        for threads in (1, 8):
            stem = f"c{i}_t{threads}"
            code = main([a.format(o=stem) for a in cmd] + ["--threads", str(threads)])
            m = json.loads((tmp_path / f"{stem}.{cmd[-1].split('.')[-1]}.manifest.json").read_text())
            outs[threads] = [(tmp_path / a["path"]).read_bytes() for a in m["artifacts"]]
            if code != 0:
                failures.append((cmd[0], threads, "exit", code))
            if main(["replay", "--manifest", f"{stem}.{cmd[-1].split('.')[-1]}.manifest.json"]) != 0:
                failures.append((cmd[0], threads, "replay"))
        if outs[1] != outs[8]:
            failures.append((cmd[0], "threads 1 vs 8"))
    ok = not failures
    record_acceptance(11, ok, f"{len(commands)} commands, each replayed from its manifest and run at "
                              f"--threads 1 and 8; mismatches: {failures or 'none'}")
    assert ok
