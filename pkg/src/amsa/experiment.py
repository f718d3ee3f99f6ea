"""Multi-seed experiments: configuration, execution, aggregation, rate fits and reports.

Seeds are split into fixed-size chunks that run as independent tasks; the
chunking never depends on the worker count and results are reduced in seed
order, so every output byte is independent of ``threads``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources

import jsonschema
import numpy as np

from .core import load_system, system_from_dict
from .diagnostics import batch_residual_norms
from .errors import AggregationError, ConfigError, DegeneracyError, FitError, KernelError
from .plotting import plot_curves
from .problems import make_nested_linear, make_random_mfg, mfg_operator_system
from .samplers import fit_ergodicity
from .schedules import (StepSchedule, lyapunov_weights_from_steps, practical_amsa_schedule,
                        practical_msa_schedule, predict_amsa_rate, predict_msa_rate)
from .solvers import run, run_batch, trajectory_rows

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
SEED_CHUNK = 25
MAX_DIVERGED_FRACTION = 0.2

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["config_version", "problem", "solvers", "horizon", "seeds"],
    "properties": {
        "config_version": {"const": CONFIG_VERSION},
        "name": {"type": "string"},
        "problem": {"type": "object"},
        "solvers": {"type": "array", "items": {"enum": ["amsa", "msa"]}, "minItems": 1},
        "schedules": {"type": "object"},
        "horizon": {"type": "integer", "minimum": 100},
        "seeds": {
            "type": "object",
            "required": ["count"],
            "properties": {"count": {"type": "integer", "minimum": 1},
                           "base": {"type": "integer", "minimum": 0}},
        },
        "record_plan": {},
        "fit": {"type": "object"},
        "criteria": {"type": "object"},
        "f_init": {"enum": ["sample", "zero"]},
    },
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["config_version", "name", "config_hash", "horizon", "seeds", "solvers",
                 "pass", "status"],
    "properties": {
        "solvers": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["slope", "predicted_slope", "gap", "pass", "status", "diverged",
                             "schedule"],
                "properties": {
                    "slope": {"type": ["number", "null"]},
                    "predicted_slope": {"type": "number"},
                    "gap": {"type": ["number", "null"]},
                    "pass": {"type": "boolean"},
                    "status": {"type": "string"},
                    "diverged": {"type": "integer", "minimum": 0},
                },
            },
        },
        "pass": {"type": "boolean"},
        "status": {"enum": ["pass", "fail", "no decay", "diverged"]},
    },
}


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    n_points: int

    def to_dict(self):
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def fit_rate(t, values, window=None):
    """OLS of ``log(value)`` on ``log(t + 1)`` over ``window = (t_lo, t_hi)``."""
    t = np.asarray(t, dtype=float)
    values = np.asarray(values, dtype=float)
    if window is None:
        window = (t[0], t[-1])
    t_lo, t_hi = window
    sel = (t >= t_lo) & (t <= t_hi)
    if sel.sum() < 5:
        raise FitError(f"only {int(sel.sum())} points in window {window}, need 5")
    v = values[sel]
    if not np.any(v > 0):
        raise FitError("all values in the fit window are zero")
    if np.any(v <= 0):
        warnings.warn("non-positive values floored at 1e-300 for the rate fit", RuntimeWarning)
        v = np.maximum(v, 1e-300)
    X = np.log(t[sel] + 1.0)
    Y = np.log(v)
    xm, ym = X.mean(), Y.mean()
    sxx = ((X - xm) ** 2).sum()
    if sxx == 0:
        raise FitError("fit window holds a single t value")
    slope = ((X - xm) * (Y - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_tot = ((Y - ym) ** 2).sum()
    ss_res = ((Y - intercept - slope * X) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RateFit(float(slope), float(intercept), float(r2),
                   (int(t[sel][0]), int(t[sel][-1])), int(sel.sum()))


def aggregate_trials(trajectories):
    """Seed mean and standard error of each recorded quantity.

    ``trajectories`` is a list of ``{"t": array, quantity: array, ...}``
    mappings sharing one record grid. Returns ``{quantity: (t, mean, stderr)}``.
    """
    if not trajectories:
        raise AggregationError("nothing to aggregate")
    t = np.asarray(trajectories[0]["t"])
    keys = [k for k in trajectories[0] if k != "t"]
    for tr in trajectories[1:]:
        if not np.array_equal(np.asarray(tr["t"]), t) or sorted(k for k in tr if k != "t") != sorted(keys):
            raise AggregationError("trajectories have mismatched record grids or quantities")
    n = len(trajectories)
    out = {}
    for k in keys:
        stack = np.stack([np.asarray(tr[k], dtype=float) for tr in trajectories])
        mean = stack.sum(axis=0) / n
        if n > 1:
            se = np.sqrt(((stack - mean) ** 2).sum(axis=0) / (n - 1) / n)
        else:
            se = np.zeros_like(mean)
        out[k] = (t, mean, se)
    return out


# ---------------------------------------------------------------------------
# configuration


def bundled_config(name):
    """Load a config shipped with the package, e.g. ``nested_linear_n2``."""
    fname = name if name.endswith(".json") else name + ".json"
    text = resources.files("amsa").joinpath("configs", fname).read_text()
    return json.loads(text)


def load_config(path):
    if not os.path.exists(path):
        try:
            return bundled_config(os.path.basename(path))
        except FileNotFoundError:
            raise ConfigError(f"config {path!r} not found") from None
    with open(path) as fh:
        return json.load(fh)


def validate_config(config):
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    fit = config.get("fit", {})
    if fit.get("window") is not None:
        lo, hi = fit["window"]
        if not 0 <= lo < hi <= config["horizon"]:
            raise ConfigError(f"fit window {fit['window']} outside [0, {config['horizon']}]")
    return config


def config_hash(config):
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def build_problem(spec):
    if "path" in spec:
        return load_system(spec["path"])
    if "system" in spec:
        return system_from_dict(spec["system"])
    gen = spec.get("generator")
    if gen == "nested_linear":
        return make_nested_linear(
            N=spec["N"], dims=spec.get("dims"), delta_target=spec.get("delta_target", 0.5),
            coupling_scale=spec.get("coupling_scale", 0.1), sigma=spec.get("sigma", 0.5),
            kernel_kind=spec.get("kernel_kind", "fixed"), seed=spec.get("seed", 0),
            m=spec.get("m", 5), epsilon=spec.get("epsilon", 0.1))
    if gen == "mfg":
        mfg = make_random_mfg(spec.get("S", 30), spec.get("A", 10), spec.get("seed", 0),
                              spec.get("floor", 0.05), spec.get("kernel_u_weight", 0.0))
        return mfg_operator_system(mfg, spec.get("kappa", 1.0))
    if gen == "zero":
        from .core import zero_system
        return zero_system(spec.get("dims", [1]), spec.get("m", 2))
    raise ConfigError(f"unknown problem generator {gen!r}")


def build_schedule(system, solver, spec=None):
    """Schedule for ``solver`` from an explicit dict or the practical constructors."""
    spec = dict(spec or {})
    if spec.get("kind"):
        sched = StepSchedule.from_dict(spec)
        if sched.kind != solver:
            raise ConfigError(f"schedule kind {sched.kind} does not match solver {solver}")
        return sched
    delta = float(spec.get("delta", system.metadata.get("delta", 1.0)))
    delta = min(delta, 1.0)
    N = system.n_levels
    if solver == "amsa":
        return practical_amsa_schedule(N, delta, spec.get("ratio", 2.0), spec.get("lam0", 0.25))
    return practical_msa_schedule(N, delta, spec.get("exponents"), spec.get("alpha0_fast", 0.5),
                                  spec.get("growth", 2.0))


def predicted_slope(solver, N):
    return -float(predict_amsa_rate(N) if solver == "amsa" else predict_msa_rate(N))


# ---------------------------------------------------------------------------
# execution


def _residual_norms(system, thetas, fs):
    """Residual norms; systems without unique nested targets fall back to ``||F_bar_i||``."""
    try:
        return batch_residual_norms(system, thetas, fs)
    except DegeneracyError:
        means = np.stack([system.mean_operator_flat(th) for th in thetas])
        x = np.stack([np.linalg.norm(b, axis=1) for b in system.split(means)], axis=1)
        df = np.stack([np.linalg.norm(b, axis=1) for b in system.split(fs - means)], axis=1)
        return x, df


def _quantities(system, schedule, solver, trajs, mode, delta, L):
    """Per-seed recorded quantities for the aggregation step."""
    out = []
    for tr in trajs:
        q = {"t": tr.ts}
        if mode == "residuals":
            x, df = _residual_norms(system, tr.thetas, tr.fs)
            V = (x * x).sum(axis=1)
            if solver == "amsa":
                V = V + (df * df).sum(axis=1)
                for i in range(system.n_levels):
                    q[f"df_norm_{i + 1}"] = df[:, i]
            q["V"] = V
            for i in range(system.n_levels):
                q[f"x_norm_{i + 1}"] = x[:, i]
            if solver == "msa" and system.n_levels == 3:
                a = schedule.alphas(tr.ts)
                v2, v3 = lyapunov_weights_from_steps(a[:, 0], a[:, 1], a[:, 2], delta, L)
                q["weighted_V"] = x[:, 0] ** 2 + v2 * x[:, 1] ** 2 + v3 * x[:, 2] ** 2
        else:
            rows = [system.extra_metrics(th) for th in tr.thetas]
            for k in rows[0]:
                q[k] = np.array([r[k] for r in rows])
        out.append(q)
    return out


def _run_chunk(args):
    system, schedule, solver, horizon, seeds, record_plan, f_init, mode, delta, L = args
    trajs = run_batch(system, schedule, solver, horizon, seeds, f_init=f_init,
                      record_plan=record_plan)
    alive = [tr for tr in trajs if not tr.diverged]
    diverged = [{"seed": tr.seed, "t": tr.diverged_at, "level": tr.diverged_level}
                for tr in trajs if tr.diverged]
    return _quantities(system, schedule, solver, alive, mode, delta, L), diverged


def execute(system, schedule, solver, horizon, seeds, record_plan="log", f_init="sample",
            mode="residuals", threads=1):
    """Run all seeds and return ``(per-seed quantities, diverged list)`` in seed order."""
    delta = float(system.metadata.get("delta", 1.0))
    L = float(system.metadata.get("lipschitz", 1.0))
    chunks = [seeds[i:i + SEED_CHUNK] for i in range(0, len(seeds), SEED_CHUNK)]
    tasks = [(system, schedule, solver, horizon, c, record_plan, f_init, mode, delta, L)
             for c in chunks]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(t) for t in tasks]
    quantities, diverged = [], []
    for q, d in results:
        quantities.extend(q)
        diverged.extend(d)
    return quantities, diverged


def default_window(system, schedule, ts, decades=1.5):
    """Last ``decades`` of recorded t, skipping the first ``max(10 h, 10 tau(step_0))`` iterations."""
    t_hi = int(ts[-1])
    step0 = float(schedule.lam(0)) if schedule.kind == "amsa" else float(schedule.alphas(0)[-1])
    tau0 = 0
    try:
        cert = fit_ergodicity(system.kernel, system.initial_point())
        tau0 = cert.tau(min(step0, 0.5))
    except (KernelError, NotImplementedError, AttributeError):
        tau0 = 0
    t_lo = max(t_hi / 10**decades, 10 * schedule.h, 10 * tau0)
    return int(math.ceil(t_lo)), t_hi


def _write_curves(path, curves_by_solver):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "solver", "quantity", "mean", "stderr"])
        for solver, curves in curves_by_solver.items():
            for qname in sorted(curves):
                t, mean, se = curves[qname]
                for a, b, c in zip(t, mean, se):
                    w.writerow([int(a), solver, qname, repr(float(b)), repr(float(c))])


def read_curves(path):
    """``{solver: {quantity: (t, mean, stderr)}}`` from a ``curves.csv`` file."""
    acc = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            acc.setdefault(row["solver"], {}).setdefault(row["quantity"], []).append(
                (int(row["t"]), float(row["mean"]), float(row["stderr"])))
    out = {}
    for solver, qs in acc.items():
        out[solver] = {}
        for q, rows in qs.items():
            arr = np.array(rows)
            out[solver][q] = (arr[:, 0], arr[:, 1], arr[:, 2])
    return out


def _value_at(t, v, target):
    return float(v[int(np.searchsorted(t, target))]) if target <= t[-1] else float(v[-1])


def _mfg_checks(curves, criteria):
    t_ref = int(criteria.get("t_ref", 100))
    metrics = criteria.get("metrics", ["grad_norm", "meanfield_gap"])
    per = {}
    for solver, cur in curves.items():
        per[solver] = {}
        for m in metrics:
            t, mean, _ = cur[m]
            start, final = _value_at(t, mean, t_ref), float(mean[-1])
            per[solver][m] = {"at_t_ref": start, "final": final, "decreased": final < start}
    order = {}
    if "amsa" in per and "msa" in per:
        for m in metrics:
            order[m] = per["amsa"][m]["final"] <= per["msa"][m]["final"]
    return per, order


def run_experiment(config, out_dir=None, threads=1, quiet=True):
    """Execute a validated config and write ``curves.csv``, ``summary.json`` and plots."""
    config = validate_config(copy.deepcopy(config))
    name = config.get("name", "experiment")
    system = build_problem(config["problem"])
    horizon = int(config["horizon"])
    base = int(config["seeds"].get("base", 0))
    seeds = list(range(base, base + int(config["seeds"]["count"])))
    record_plan = config.get("record_plan", "log")
    mode = config.get("diagnostics", "residuals" if system.kind == "affine" else "metrics")
    fit_cfg = config.get("fit", {})
    criteria = config.get("criteria", {})
    quantity = fit_cfg.get("quantity", "V")
    curves_by_solver, fits, solver_summary = {}, {}, {}
    diverged_any = False
    N = system.n_levels
    for solver in config["solvers"]:
        schedule = build_schedule(system, solver, config.get("schedules", {}).get(solver))
        if not quiet:
            log.info("running %s on %s with %d seeds", solver, name, len(seeds))
        per_seed, diverged = execute(system, schedule, solver, horizon, seeds, record_plan,
                                     config.get("f_init", "sample"), mode, threads)
        frac = len(diverged) / len(seeds)
        diverged_any |= frac > MAX_DIVERGED_FRACTION
        entry = {"schedule": schedule.to_dict(), "diverged": len(diverged),
                 "diverged_seeds": diverged, "predicted_slope": predicted_slope(solver, N),
                 "slope": None, "gap": None, "pass": False, "status": "diverged"}
        solver_summary[solver] = entry
        if not per_seed:
            continue
        curves = aggregate_trials(per_seed)
        curves_by_solver[solver] = curves
        if mode == "residuals":
            t, mean, _ = curves[quantity]
            window = tuple(fit_cfg["window"]) if fit_cfg.get("window") else default_window(
                system, schedule, t, fit_cfg.get("decades", 1.5))
            try:
                fit = fit_rate(t, mean, window)
            except FitError as exc:
                entry.update(status="no decay", detail=str(exc))
                continue
            fits[solver] = fit
            entry.update(fit.to_dict())
            entry["gap"] = fit.slope - entry["predicted_slope"]
            if fit.slope >= 0:
                entry["status"] = "no decay"
            else:
                entry["status"] = "ok"
            entry["pass"] = _slope_pass(solver, fit.slope, entry["predicted_slope"], criteria,
                                        entry["status"])
        else:
            entry["status"] = "ok"
            entry["final"] = {q: float(c[1][-1]) for q, c in curves.items()}
            entry["pass"] = True
        if frac > MAX_DIVERGED_FRACTION:
            entry["status"], entry["pass"] = "diverged", False
    summary = {
        "config_version": CONFIG_VERSION, "name": name, "config_hash": config_hash(config),
        "horizon": horizon, "seeds": len(seeds), "quantity": quantity,
        "solvers": solver_summary,
    }
    ok = all(e["pass"] for e in solver_summary.values())
    if mode == "residuals" and "amsa" in fits and "msa" in fits:
        sep = fits["msa"].slope - fits["amsa"].slope
        need = float(criteria.get("separation_min", 0.0))
        summary["comparison"] = {"separation": sep, "separation_min": need, "pass": sep >= need}
        ok &= sep >= need
    if mode == "metrics":
        per, order = _mfg_checks(curves_by_solver, criteria)
        decreased = all(v["decreased"] for s in per.values() for v in s.values())
        summary["comparison"] = {"metrics": per, "amsa_not_worse": order, "all_decreased": decreased,
                                 "pass": decreased and all(order.values())}
        ok &= summary["comparison"]["pass"]
    status = "pass" if ok else "fail"
    if diverged_any:
        status = "diverged"
    elif any(e["status"] == "no decay" for e in solver_summary.values()):
        status = "no decay"
    summary["pass"] = bool(ok and not diverged_any)
    summary["status"] = status
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    if out_dir is not None:
        write_report(out_dir, config, summary, curves_by_solver, fits, mode)
    return {"summary": summary, "curves": curves_by_solver, "fits": fits, "system": system}


def _slope_pass(solver, slope, predicted, criteria, status):
    if status != "ok":
        return False
    crit = criteria.get(solver, {})
    if "slope_max" in crit or "slope_min" in crit:
        return crit.get("slope_min", -math.inf) <= slope <= crit.get("slope_max", math.inf)
    return abs(slope - predicted) <= float(criteria.get("tolerance", 0.2))


def plot_quantities(summary, curves_by_solver, mode):
    if mode == "metrics":
        return sorted({q for c in curves_by_solver.values() for q in c})
    return [summary["quantity"]] + (["weighted_V"] if any(
        "weighted_V" in c for c in curves_by_solver.values()) else [])


def write_report(out_dir, config, summary, curves_by_solver, fits, mode):
    os.makedirs(out_dir, exist_ok=True)
    _write_curves(os.path.join(out_dir, "curves.csv"), curves_by_solver)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)
        fh.write("\n")
    predicted = {s: e["predicted_slope"] for s, e in summary["solvers"].items()}
    for q in plot_quantities(summary, curves_by_solver, mode):
        curves = {s: c[q] for s, c in curves_by_solver.items() if q in c}
        if not curves:
            continue
        plot_curves(os.path.join(out_dir, f"plot_{q}.svg"), q, curves,
                    fits if q == summary["quantity"] and mode == "residuals" else None,
                    predicted if q == summary["quantity"] and mode == "residuals" else None,
                    title=summary["name"])


def analyze(out_dir, window=None, quantity=None):
    """Re-fit rates from an existing ``curves.csv`` using the stored fit windows."""
    curves = read_curves(os.path.join(out_dir, "curves.csv"))
    with open(os.path.join(out_dir, "summary.json")) as fh:
        summary = json.load(fh)
    quantity = quantity or summary.get("quantity", "V")
    fits = {}
    for solver, cur in curves.items():
        if quantity not in cur:
            continue
        entry = summary["solvers"].get(solver, {})
        win = window or entry.get("window")
        if win is None:
            continue
        t, mean, _ = cur[quantity]
        fits[solver] = fit_rate(t, mean, tuple(win))
    return fits


def dump_trajectory(system, schedule, solver, horizon, seed, out_dir, config=None,
                    record_plan="log"):
    """Write ``traj_<solver>_<seed>.csv`` (t, level, quantity, value) and its JSON sidecar."""
    from .diagnostics import trajectory_diagnostics

    traj = run(system, schedule, solver, horizon, seed, record_plan=record_plan)
    diag = None
    if system.affine_structure() is not None:
        delta = float(system.metadata.get("delta", 1.0))
        L = float(system.metadata.get("lipschitz", 1.0))
        diag = trajectory_diagnostics(traj, system, schedule, delta, L)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, f"traj_{solver}_{seed}")
    with open(stem + ".csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "level", "quantity", "value"])
        for t, lvl, q, v in trajectory_rows(traj, system, diag):
            w.writerow([t, lvl, q, repr(v)])
    side = {"seed": seed, "solver": solver, "diverged": traj.diverged,
            "config_hash": config_hash(config) if config is not None else None}
    with open(stem + ".json", "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return traj
