import json
import math

import numpy as np
import pytest

from coxlasso.data import CovariatePath, Dataset, Subject
from coxlasso.factors import ConeSpec, solve_eta
from coxlasso.harness import (
    EXPERIMENTS,
    ExperimentConfig,
    check_basic_inequality,
    check_corollary1,
    check_lemma2,
    check_theorem1,
    default_t_grid,
    default_x_grid,
    experiment_from_kv,
    experiment_to_kv,
    load_experiment,
    run_experiment,
    theorem1_bounds,
    vstat_bound,
    vstat_tail_experiment,
    write_report,
)
from coxlasso.likelihood import gradient
from coxlasso.simulate import SimConfig, read_kv, simulate_dataset
from coxlasso.solver import fit_lasso

from oracles import random_dataset

SIM = SimConfig(n=100, p=5, beta_true=(1.0, -1.0, 0.0, 0.0, 0.0), censor_rate=0.2, seed=17)


def _cfg(**kw):
    base = dict(sim=SIM, reps=4, lambda_rule="oracle", lambda_factor=1.5, envelope_samples=200, n_starts=4,
                pop_reps=4, pilot_reps=4, directions=2, vstat_n=30)
    base.update(kw)
    return ExperimentConfig(**base)


# ----------------------------------------------------------------------------
# single-instance checks


def test_perfect_recovery_has_no_violations(rng):
    d = random_dataset(rng, 40, 4)
    beta0 = np.array([0.5, 0.0, -0.5, 0.0])
    cone = ConeSpec((0, 2), 2.0)
    v, vals = check_basic_inequality(d, beta0, beta0, 0.3, cone)
    assert v == []
    assert vals["left"] == 0 and vals["middle"] == 0 and vals["right"] == 0


def test_non_qualifying_skips_conditional_checks(rng):
    d = random_dataset(rng, 60, 4)
    beta0 = np.array([1.0, 0.0, 0.0, 0.0])
    cone = ConeSpec((0,), 2.0)
    z = float(np.abs(gradient(d, beta0)).max())
    lam = 0.5 * z * (cone.xi - 1) / (cone.xi + 1)  # below the qualifying threshold
    fit = fit_lasso(d, lam)
    v, vals = check_basic_inequality(d, beta0, fit.beta_hat, lam, cone, kkt=fit.kkt_residual)
    assert not vals["qualifies"] and vals["cone_ok"] is None and "cone" not in v
    status, v1, _ = check_theorem1(d, beta0, fit, cone, {"kappa": 1e-6, 1.0: 1e-6})
    assert status == "not-qualifying" and v1 == []


def test_theorem1_inapplicable_when_tau_large(rng):
    d = random_dataset(rng, 60, 3)
    beta0 = np.zeros(3)
    beta0[0] = 0.5
    cone = ConeSpec((0,), 2.0)
    z = float(np.abs(gradient(d, beta0)).max())
    fit = fit_lasso(d, 4 * z)
    status, v, vals = check_theorem1(d, beta0, fit, cone, {"kappa": 1e-3, 2.0: 1e-3})
    assert status == "inapplicable" and v == [] and vals["tau"] > math.exp(-1)


def test_theorem1_bound_monotonicity():
    base = dict(lam=0.05, d_o=2, xi=2.0, K=1.0, kappa=1.0, fq={1.0: 0.8, 2.0: 0.6})
    _, _, b0 = theorem1_bounds(**base)
    # every bound moves through eta as well, so the dependence is strict
    for key, factor, direction in (("lam", 1.2, 1), ("d_o", 1.5, 1), ("kappa", 1.1, -1)):
        _, _, b = theorem1_bounds(**{**base, key: base[key] * factor})
        assert all(direction * (b[k] - b0[k]) > 0 for k in b0)
    _, _, b = theorem1_bounds(**{**base, "fq": {1.0: 0.9, 2.0: 0.7}})
    assert b["l1"] == b0["l1"] and b["d_s"] == b0["d_s"]
    assert b["lq1"] < b0["lq1"] and b["lq2"] < b0["lq2"]


def test_theorem1_boundary_tau():
    lam, d_o, xi, K = 0.05, 2, 3.0, 1.5
    kappa = math.sqrt(math.e * K * (xi + 1) * d_o * lam / 2) * (1 + 1e-15)
    tau, eta, b = theorem1_bounds(lam, d_o, xi, K, kappa, {2.0: 1.0})
    assert tau == pytest.approx(math.exp(-1), rel=1e-14)
    assert eta == pytest.approx(1.0, abs=1e-6)
    assert solve_eta(math.exp(-1)) == 1.0
    # |theta|_1 bound = e^eta tau / K at the boundary
    assert b["l1"] == pytest.approx(1 / K, rel=1e-6)
    tau2, eta2, b2 = theorem1_bounds(lam, d_o, xi, K, kappa * 0.999, {2.0: 1.0})
    assert tau2 > math.exp(-1) and eta2 is None and b2 is None


def test_lemma2_check_examples(rng):
    d = random_dataset(rng, 30, 3)
    v, vals = check_lemma2(d, rng.normal(size=3), np.zeros(3))
    assert v == [] and vals["eta_b"] == 0 and vals["d_s"] == 0


def test_corollary1_trivial_cases(rng):
    d = simulate_dataset(SimConfig(n=60, p=3, beta_true=(1.0, 0.0, 0.0), seed=2))
    cone = ConeSpec((0,), 2.0)
    v, rows = check_corollary1(d, [1.0, 0.0, 0.0], [np.zeros(3)], cone)
    assert v == []
    assert rows[0]["kappa2"] == pytest.approx(rows[0]["kappa2_base"], rel=1e-9)
    assert rows[0]["re2"] == pytest.approx(rows[0]["re2_base"], rel=1e-3)
    shared = CovariatePath([0.5], [[0.2, -0.1, 0.3], [0.0, 0.4, -0.2]])
    subs = [Subject(0.0, 1.0 + i, 1.0 + i, shared) for i in range(5)]
    same = Dataset(tuple(subs), 3, 1.0)
    v, rows = check_corollary1(same, np.zeros(3), [np.array([0.3, -0.1, 0.0])], cone)
    assert v == [] and rows[0]["eta_b"] == 0.0


# ----------------------------------------------------------------------------
# configuration


def test_experiment_kv_round_trip(tmp_path):
    cfg = _cfg(qs=(1.0, 2.0, math.inf), x_grid=(0.1, 0.2), count_qualifying=True, m_cap=3.0, kernel="mixed")
    text = experiment_to_kv(cfg)
    assert experiment_from_kv(read_kv(text)) == cfg
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    assert load_experiment(p) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(xi=1.0)
    with pytest.raises(ValueError):
        _cfg(eps=0.0)
    with pytest.raises(ValueError):
        _cfg(lambda_rule="cv")
    with pytest.raises(ValueError):
        _cfg(kernel="quartic")
    with pytest.raises(ValueError):
        run_experiment("theorem9", _cfg())


# ----------------------------------------------------------------------------
# experiments


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_every_experiment_runs_and_passes(name):
    rep = run_experiment(name, _cfg())
    assert rep.experiment == name
    assert rep.passed, rep.violation_counts
    for v in rep.violation_counts.values():
        assert v <= max(rep.replications, len(rep.tail_table))
    json.loads(rep.to_json())
    assert rep.to_csv().count("\n") >= 2


@pytest.mark.parametrize("name", ["lemma1", "theorem1", "lemma3", "lemma5"])
def test_reports_are_byte_identical(name, tmp_path):
    a = run_experiment(name, _cfg(), threads=1)
    b = run_experiment(name, _cfg(), threads=4)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    paths = write_report(a, str(tmp_path / "r.json"))
    assert paths[1].endswith("r.csv")
    assert (tmp_path / "r.json").read_text() == a.to_json()


def test_conditional_hygiene_on_records():
    rep = run_experiment("theorem1", _cfg(reps=8, lambda_rule="fixed", lam=0.05))
    for r in rep.records:
        if not r.qualifies:
            assert r.cone_ok is None and r.bounds == {}
            assert not any(v.startswith(("theorem1_", "cone")) for v in r.violations)
        if r.applicable is False:
            assert not any(v.startswith("theorem1_") for v in r.violations)


def test_theorem1_certificates_are_linked():
    rep = run_experiment("theorem1", _cfg(reps=3, lambda_factor=3.0))
    for r in rep.records:
        if r.qualifies:
            assert set(r.certificates) >= {"kappa", "F1", "F2"}
            assert len(r.certificates["kappa"]) == SIM.p


def test_count_qualifying_stops_at_target():
    rep = run_experiment("lemma1", _cfg(reps=3, count_qualifying=True, lambda_factor=1.2))
    assert rep.notes["qualifying"] == 3
    assert rep.records[-1].qualifies


def test_theorem2_single_replication_and_zero_truth():
    rep = run_experiment("theorem2", _cfg(reps=1))
    assert rep.replications == 1 and len(rep.records) == 1
    assert 0 <= rep.notes["failure_frequency"] <= 1
    null = SimConfig(n=100, p=5, beta_true=(0.0,) * 5, seed=3)
    # the cone needs a support; the coefficient scale of the remaining entries is zero
    zero = _cfg(sim=null, reps=5, c_kappa=1.0, c_f=(1.0, 1.0))
    with pytest.raises(ValueError):
        run_experiment("theorem2", zero)
    tiny = SimConfig(n=100, p=5, beta_true=(1e-12, 0.0, 0.0, 0.0, 0.0), seed=3)
    rep = run_experiment("theorem2", _cfg(sim=tiny, reps=5, c_kappa=0.1, c_f=(0.1, 0.1)))
    assert rep.notes["zero_fit_fraction"] >= 0.8


def test_lemma3_zero_threshold_and_monotone_tails():
    rep = run_experiment("lemma3", _cfg(reps=20, x_grid=(0.0, 0.05, 0.1, 0.2, 0.4)))
    for q in ("gradient_sup", "hessian_martingale_max", "hessian_martingale_00"):
        rows = [r for r in rep.tail_table if r["quantity"] == q]
        freqs = [r["frequency"] for r in rows]
        assert freqs[0] <= 1 and all(a >= b for a, b in zip(freqs, freqs[1:]))
        assert all(r["ok"] for r in rows)


def test_default_grids_hit_their_levels():
    n, p = 200, 20
    xs = default_x_grid(n, p)
    assert 2 * p * math.exp(-n * xs[0] ** 2 / 2) == pytest.approx(1.0)
    assert 2 * p * math.exp(-n * xs[-1] ** 2 / 2) == pytest.approx(1e-3)
    ts = default_t_grid(100)
    assert vstat_bound(100, ts[0]) == pytest.approx(1.0)
    assert vstat_bound(100, ts[-1]) == pytest.approx(1e-3)


def test_vstat_zero_kernel_and_vacuous_points():
    rows = vstat_tail_experiment(50, (0.01, 0.5), 200, kernel="zero", seed=1)
    assert all(r["frequency"] == 0.0 for r in rows)
    rows = vstat_tail_experiment(50, (1e-4,), 200, kernel="linear", seed=1)
    assert all(r["bound"] >= 1 and r["ok"] for r in rows)


def test_vstat_mixed_kernel_has_both_tails():
    rows = vstat_tail_experiment(100, (0.02,), 2000, kernel="mixed", seed=5)
    plus, minus = rows
    assert plus["frequency"] > 0 and minus["frequency"] > 0


def test_theorem3_vacuous_for_tiny_n():
    small = SimConfig(n=30, p=4, beta_true=(1.0, 0.0, 0.0, 0.0), seed=6)
    rep = run_experiment("theorem3", _cfg(sim=small, reps=3, m_cap=2.0))
    assert rep.notes["vacuous"] and rep.notes["lower_bound"] < 0
    assert rep.passed


def test_theorem3_small_amplitude_surrogate():
    # the deduction and rho_* both scale like K^2: small amplitude makes the
    # deduction small in absolute terms, not relative to rho_*
    out = {}
    for K in (1e-3, 1.0):
        sim = SimConfig(n=300, p=3, beta_true=(1.0, 0.0, 0.0), k_bound=K, seed=7)
        out[K] = run_experiment("theorem3", _cfg(sim=sim, reps=4, pop_reps=10, m_cap=2.0))
    small = out[1e-3].notes
    assert small["deduction"] < 1e-5
    assert abs(small["lower_bound"] - small["rho_star"]) < 1e-5
    re2 = np.array([r.values["re2"] for r in out[1e-3].records])
    assert np.all(np.abs(re2 - small["rho_star"]) < 1e-6)
    ratio = {K: r.notes["deduction"] / r.notes["rho_star"] for K, r in out.items()}
    assert ratio[1e-3] == pytest.approx(ratio[1.0], rel=0.2)
