import json
import warnings

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amsa.errors import AggregationError, ConfigError, FitError
from amsa.experiment import (SUMMARY_SCHEMA, aggregate_trials, analyze, bundled_config,
                             config_hash, default_window, execute, fit_rate, read_curves,
                             run_experiment, validate_config)
from amsa.schedules import StepSchedule


def small_config(**over):
    cfg = bundled_config("nested_linear_n2")
    cfg.update(horizon=20000, seeds={"count": 4, "base": 0}, fit={"window": [2000, 20000]})
    cfg.update(over)
    return cfg


@pytest.mark.parametrize("power", [1.0, 2 / 3, 0.5])
def test_fit_rate_exact_power_laws(power):
    t = np.unique(np.logspace(0, 5, 200).astype(int))
    fit = fit_rate(t, 3.0 / (t + 1.0) ** power, (10, 10**5))
    assert fit.slope == pytest.approx(-power, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_rate_errors_and_floor():
    t = np.arange(10)
    with pytest.raises(FitError):
        fit_rate(t, np.zeros(10))
    with pytest.raises(FitError):
        fit_rate(t, np.ones(10), (0, 3))
    v = 1.0 / (t + 1.0)
    v[4] = 0.0
    with pytest.warns(RuntimeWarning):
        fit_rate(t, v)


def test_aggregate_examples():
    t = np.arange(5)
    a = 1.0 / (t + 1)
    out = aggregate_trials([{"t": t, "V": a}])
    np.testing.assert_array_equal(out["V"][1], a)
    out = aggregate_trials([{"t": t, "V": a}, {"t": t, "V": 3 * a}])
    np.testing.assert_allclose(out["V"][1], 2 * a, rtol=1e-15)
    with pytest.raises(AggregationError):
        aggregate_trials([{"t": t, "V": a}, {"t": t + 1, "V": a}])
    with pytest.raises(AggregationError):
        aggregate_trials([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.1, 10))
def test_aggregation_is_linear(seed, n, c):
    rng = np.random.default_rng(seed)
    t = np.arange(6)
    trajs = [{"t": t, "V": rng.random(6)} for _ in range(n)]
    base = aggregate_trials(trajs)["V"]
    scaled = aggregate_trials([{"t": t, "V": c * tr["V"]} for tr in trajs])["V"]
    np.testing.assert_allclose(scaled[1], c * base[1], rtol=1e-12)
    np.testing.assert_allclose(scaled[2], c * base[2], rtol=1e-12)


def test_standard_error_scales_with_seed_count(bench_n2):
    from amsa.experiment import build_schedule
    sched = build_schedule(bench_n2, "amsa")
    per, _ = execute(bench_n2, sched, "amsa", 2000, list(range(100)))
    V = np.stack([q["V"] for q in per])[:, -1]
    se = aggregate_trials(per)["V"][2][-1]
    assert se == pytest.approx(V.std(ddof=1) / 10, rel=1e-9)


def test_config_validation():
    with pytest.raises(ConfigError):
        validate_config({"config_version": 1})
    cfg = small_config()
    cfg["horizon"] = 50
    with pytest.raises(ConfigError):
        validate_config(cfg)
    cfg = small_config(fit={"window": [10, 10**9]})
    with pytest.raises(ConfigError):
        validate_config(cfg)
    assert config_hash(small_config()) == config_hash(small_config())


def test_default_window_skips_transient(bench_n2):
    s = StepSchedule("amsa", 2, 1023.0, (64.0, 128.0), 256.0)
    t = np.arange(0, 10**5 + 1, 100)
    lo, hi = default_window(bench_n2, s, t)
    assert hi == 10**5 and lo >= 10 * 1023 and lo >= 10**5 / 10**1.5


def test_zero_problem_reports_no_decay(tmp_path):
    cfg = {"config_version": 1, "name": "zero", "problem": {"generator": "zero", "dims": [1, 1]},
           "solvers": ["amsa"], "schedules": {"amsa": {"kind": "amsa", "n_levels": 2, "h": 10,
                                                        "c": [1, 2], "c_lambda": 4}},
           "horizon": 1000, "seeds": {"count": 2}, "fit": {"window": [100, 1000]}}
    res = run_experiment(cfg, tmp_path)
    assert res["summary"]["solvers"]["amsa"]["status"] == "no decay"
    assert res["summary"]["status"] == "no decay" and not res["summary"]["pass"]


def test_run_writes_report_bundle(tmp_path):
    res = run_experiment(small_config(), tmp_path)
    s = json.loads((tmp_path / "summary.json").read_text())
    jsonschema.validate(s, SUMMARY_SCHEMA)
    assert "slope" in s["solvers"]["amsa"] and "slope" in s["solvers"]["msa"]
    assert (tmp_path / "plot_V.svg").read_text().lstrip().startswith("<?xml")
    curves = read_curves(tmp_path / "curves.csv")
    np.testing.assert_array_equal(curves["amsa"]["V"][1], res["curves"]["amsa"]["V"][1])
    refit = analyze(tmp_path)
    for solver in ("amsa", "msa"):
        assert refit[solver].to_dict() == res["fits"][solver].to_dict()


def test_threads_do_not_change_outputs(tmp_path):
    cfg = small_config(seeds={"count": 60, "base": 0}, horizon=2000, fit={"window": [200, 2000]})
    run_experiment(cfg, tmp_path / "a", threads=1)
    run_experiment(cfg, tmp_path / "b", threads=2)
    for f in ("curves.csv", "summary.json", "plot_V.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_divergence_fails_experiment(tmp_path):
    cfg = small_config(horizon=500, fit={"window": [50, 500]})
    cfg["schedules"] = {"amsa": {"kind": "amsa", "n_levels": 2, "h": 0, "c": [64, 128],
                                 "c_lambda": 256}}
    cfg["solvers"] = ["amsa"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_experiment(cfg, None)
    entry = res["summary"]["solvers"]["amsa"]
    assert entry["diverged"] == 4 and entry["status"] == "diverged"
    assert res["summary"]["status"] == "diverged"
