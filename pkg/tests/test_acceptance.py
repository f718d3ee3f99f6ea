"""Acceptance suite: one test per criterion, at the stated tolerances.

Run ``pytest tests/test_acceptance.py -v``; a summary section lists one
pass/fail line per criterion. The full-scale experiments are marked slow.
"""
import json
from fractions import Fraction

import numpy as np
import pytest

from amsa.diagnostics import (check_lemma_bound_x, check_lemma_lipschitz, estimate_nested_delta,
                              residuals, trajectory_diagnostics, verify_target_identity)
from amsa.experiment import build_schedule, bundled_config, fit_rate, run_experiment
from amsa.problems import make_nested_linear
from amsa.samplers import FixedKernel, fit_ergodicity, mixing_time, stationary_distribution, tv_curve
from amsa.schedules import compliant_amsa_schedule, optimal_msa_exponents, predict_msa_rate
from amsa.solvers import run

BUNDLE = ("curves.csv", "summary.json", "plot_V.svg")


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    """Lazily run bundled configs; results are cached per (config, threads)."""
    cache = {}

    def get(name, threads=1):
        key = (name, threads)
        if key not in cache:
            out = tmp_path_factory.mktemp(f"{name}_t{threads}")
            cache[key] = (run_experiment(bundled_config(name), out, threads=threads), out)
        return cache[key]
    return get


def _seed_averaged_slope(res, solver):
    cfg_window = res["summary"]["solvers"][solver]["window"]
    t, mean, _ = res["curves"][solver]["V"]
    return fit_rate(t, mean, tuple(cfg_window)).slope


# 1


@pytest.mark.slow
@pytest.mark.criterion(1, "rate separation, N=2")
def test_rate_separation_n2(full_runs, record_property):
    res, _ = full_runs("nested_linear_n2")
    s = res["summary"]
    assert s["seeds"] == 100 and s["horizon"] == 10**5
    sa, sm = _seed_averaged_slope(res, "amsa"), _seed_averaged_slope(res, "msa")
    record_property("detail", f"A-MSA slope {sa:.3f}, MSA slope {sm:.3f}, gap {sm - sa:.3f}")
    assert sa == pytest.approx(s["solvers"]["amsa"]["slope"], abs=1e-12)
    assert sa <= -0.80
    assert -0.85 <= sm <= -0.45
    assert sa <= sm - 0.10


# 2


@pytest.mark.slow
@pytest.mark.criterion(2, "rate separation, N=3")
def test_rate_separation_n3(full_runs, record_property):
    res, _ = full_runs("nested_linear_n3")
    sa, sm = _seed_averaged_slope(res, "amsa"), _seed_averaged_slope(res, "msa")
    record_property("detail", f"A-MSA slope {sa:.3f}, MSA slope {sm:.3f}")
    assert sa <= -0.80
    assert -0.70 <= sm <= -0.30


# 3


@pytest.mark.criterion(3, "theoretical rate tables")
def test_rate_tables():
    for N, want in ((2, Fraction(2, 3)), (3, Fraction(1, 2)), (4, Fraction(2, 5))):
        got = predict_msa_rate(N)
        assert got == want and type(got) is Fraction
    assert optimal_msa_exponents(3) == (Fraction(1), Fraction(3, 4), Fraction(1, 2))


# 4


def _benchmarks():
    for N in (1, 2, 3, 4):
        for seed in (0, 1, 7):
            yield make_nested_linear(N=N, dims=[3] * N, delta_target=0.5, coupling_scale=0.1,
                                     sigma=0.5, seed=seed)
    yield make_nested_linear(N=2, kernel_kind="theta-mixture", seed=3)
    yield make_nested_linear(N=3, dims=[2, 1, 2], coupling_scale=0.2, seed=11)


@pytest.mark.criterion(4, "residual oracle and target identity")
def test_residual_oracle(record_property):
    worst = 0.0
    for sys_ in _benchmarks():
        sol = sys_.solution
        rec = residuals((sol, sys_.mean_operator_flat(sol)), sys_)
        worst = max(worst, rec.V)
        assert rec.V <= 1e-14
    rng = np.random.default_rng(2024)
    bench = make_nested_linear(N=3, dims=[3, 3, 3], delta_target=0.5, coupling_scale=0.1, sigma=0.5)
    for k in range(20):
        i = 2 + k % 2
        prefix = rng.normal(scale=2.0, size=bench.offsets[i - 2])
        assert verify_target_identity(bench, prefix, i - 1, 3, tol=1e-7)
    record_property("detail", f"worst V at solution {worst:.2e}")


# 5


def _lambda_one(t):
    return 1.0


def _lambda_one_run(bench):
    sched = build_schedule(bench, "amsa")
    return run(bench, sched, "amsa", 10**4, seed=17, record_plan="dense", lambda_fn=_lambda_one)


@pytest.mark.criterion(5, "lambda = 1 reduction")
def test_lambda_one_reduction(bench_n2):
    tr = _lambda_one_run(bench_n2)
    assert not tr.diverged and tr.ts[-1] == 10**4
    raw = bench_n2.evaluate_flat(tr.thetas[:-1], tr.states[:-1])
    assert np.array_equal(tr.fs[1:], raw)


# 6


@pytest.mark.criterion(6, "mixing machinery")
def test_mixing_machinery(record_property):
    from test_samplers import brute_force_mixing_time
    P = [[0.8, 0.2], [0.3, 0.7]]
    k = FixedKernel(P)
    np.testing.assert_allclose(stationary_distribution(k), [0.6, 0.4], atol=1e-10, rtol=0)
    taus = []
    for a in (0.1, 0.01, 0.001):
        taus.append(mixing_time(k, a=a))
        assert taus[-1] == brute_force_mixing_time(P, a)
    cert = fit_ergodicity(k, horizon=200)
    t = np.arange(201)
    assert np.all(cert.bound(t) >= tv_curve(k, horizon=200))
    record_property("detail", f"mixing times {taus}")


# 7


def _compliant_run(bench):
    delta = min(estimate_nested_delta(bench), 1.0)
    L = bench.metadata["lipschitz"]
    cert = fit_ergodicity(bench.kernel)

    def tau_factory(sched):
        return lambda t: cert.tau(min(sched.lam(t), 0.5))
    sched = compliant_amsa_schedule(2, delta, L, D=1.0, tau_fn_factory=tau_factory, horizon=1000)
    tr = run(bench, sched, "amsa", 1000, seed=5, record_plan="dense")
    return tr, sched, delta, L, tau_factory(sched)


@pytest.mark.criterion(7, "pathwise lemma suite")
def test_pathwise_lemmas(bench_n2, record_property):
    tr, sched, delta, L, tau_fn = _compliant_run(bench_n2)
    assert not tr.diverged and tr.ts.size == 1001
    recs = trajectory_diagnostics(tr, bench_n2)
    lip = check_lemma_lipschitz(tr, bench_n2, sched, L, recs)
    bx = check_lemma_bound_x(tr, bench_n2, sched, delta, L, D=1.0, tau_fn=tau_fn, records=recs)
    violations = sum(not r["pass"] for r in lip.rows) + sum(not r["pass"] for r in bx.rows)
    record_property("detail", f"{len(lip.rows) + len(bx.rows)} inequalities, {violations} violations")
    assert bx.preconditions_ok, bx.note
    assert violations == 0


# 8


@pytest.mark.slow
@pytest.mark.criterion(8, "MFG experiment")
def test_mfg_experiment(full_runs, record_property):
    res, _ = full_runs("mfg")
    s = res["summary"]
    assert s["seeds"] == 20
    finals = {}
    for metric in ("grad_norm", "meanfield_gap"):
        for solver in ("amsa", "msa"):
            t, mean, _ = res["curves"][solver][metric]
            start = mean[np.searchsorted(t, 100)]
            assert t[np.searchsorted(t, 100)] == 100
            assert mean[-1] < start, f"{solver} {metric} did not decrease"
            finals[solver, metric] = float(mean[-1])
        assert finals["amsa", metric] <= finals["msa", metric]
    record_property("detail", ", ".join(f"{m} A-MSA {finals['amsa', m]:.3g} vs MSA {finals['msa', m]:.3g}"
                                        for m in ("grad_norm", "meanfield_gap")))


# 9


@pytest.mark.slow
@pytest.mark.criterion(9, "determinism across reruns and thread counts")
def test_determinism(full_runs, bench_n2):
    for name in ("nested_linear_n2", "nested_linear_n3", "mfg"):
        _, out1 = full_runs(name, threads=1)
        _, out2 = full_runs(name, threads=2)
        files = BUNDLE if name != "mfg" else ("curves.csv", "summary.json")
        for f in files:
            assert (out1 / f).read_bytes() == (out2 / f).read_bytes(), f"{name}/{f}"
        json.loads((out1 / "summary.json").read_text())
    a, b = _lambda_one_run(bench_n2), _lambda_one_run(bench_n2)
    assert np.array_equal(a.fs, b.fs) and np.array_equal(a.states, b.states)
    a, b = _compliant_run(bench_n2)[0], _compliant_run(bench_n2)[0]
    assert np.array_equal(a.thetas, b.thetas)
    assert [r.V for r in trajectory_diagnostics(a, bench_n2)] == \
        [r.V for r in trajectory_diagnostics(b, bench_n2)]
