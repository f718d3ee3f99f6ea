"""A-MSA and MSA iterations over batches of independent trajectories.

Each trajectory owns a ``numpy.random.Generator`` seeded from its 64-bit
seed and consumes ``kernel.uniforms_per_step`` uniforms per iteration, so a
trajectory's path depends only on its own seed, never on batch layout.
All per-row arithmetic is elementwise or :func:`rowwise_matmul`, which keeps
batched and single-trajectory runs bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ParameterStack, as_stack
from .errors import DimensionError, DivergenceError, ScheduleError, StateRangeError

DIVERGENCE_CAP = 1e12
LOG_POINTS_PER_DECADE = 60
MAX_RECORDS = 512
CHUNK = 4096


@dataclass
class SolverState:
    t: int
    theta: ParameterStack
    f: ParameterStack
    x_state: int
    rng: np.random.Generator


@dataclass
class Trajectory:
    seed: int
    solver: str
    ts: np.ndarray
    thetas: np.ndarray
    fs: np.ndarray
    states: np.ndarray
    diverged: bool = False
    diverged_at: int | None = None
    diverged_level: int | None = None
    final: SolverState | None = field(default=None, repr=False)

    @property
    def n_records(self):
        return self.ts.size


def record_times(plan, horizon):
    """Sorted record iterations for ``plan`` (always including 0 and horizon)."""
    if isinstance(plan, str):
        if plan == "none":
            ts = [0, horizon]
        elif plan == "dense":
            ts = range(horizon + 1)
        elif plan == "log":
            decades = math.log10(max(horizon, 1))
            # exact powers of ten so curves can be read at t = 10^k
            tens = [10**k for k in range(int(decades) + 1) if 10**k <= horizon]
            n = min(MAX_RECORDS - 2 - len(tens), max(2, int(round(LOG_POINTS_PER_DECADE * decades))))
            ts = np.concatenate([[0, horizon], tens, np.rint(np.logspace(0, decades, n))])
        else:
            raise ValueError(f"unknown record plan {plan!r}")
    else:
        ts = list(plan) + [0, horizon]
    ts = np.unique(np.asarray(ts, dtype=np.int64))
    if ts[0] < 0 or ts[-1] > horizon:
        raise ValueError("record plan leaves [0, horizon]")
    return ts


def _level_index(system):
    return np.repeat(np.arange(system.n_levels), system.dims)


def _check_schedule(system, schedule, solver):
    if solver not in ("amsa", "msa"):
        raise ValueError(f"unknown solver {solver!r}")
    if schedule.kind != solver:
        raise ScheduleError(f"{solver} solver needs a {solver} schedule, got {schedule.kind}")
    if schedule.n_levels != system.n_levels:
        raise ScheduleError(f"schedule has {schedule.n_levels} levels, system {system.n_levels}")


def _first_bad_level(system, theta_row, f_row, cap):
    for i in range(1, system.n_levels + 1):
        sl = system.level_slice(i)
        for blk in (theta_row[sl], f_row[sl]):
            if not np.all(np.isfinite(blk)) or np.linalg.norm(blk) > cap:
                return i
    return 1


def run_batch(system, schedule, solver, horizon, seeds, theta0=None, f0=None, x0=0,
              f_init="sample", record_plan="log", lambda_fn=None, divergence_cap=DIVERGENCE_CAP):
    """Run one trajectory per seed in lock-step and return their :class:`Trajectory` list."""
    _check_schedule(system, schedule, solver)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seeds = [int(s) for s in seeds]
    B, D = len(seeds), system.D
    kernel = system.kernel
    k = kernel.uniforms_per_step
    theta = np.empty((B, D))
    theta[:] = system.initial_point() if theta0 is None else as_stack(theta0, system.dims).flat
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.int64), (B,)).copy()
    if np.any(x0 < 0) or np.any(x0 >= kernel.m):
        raise StateRangeError(f"initial state outside [0, {kernel.m})")
    x = x0
    system.project(theta)
    f = np.zeros((B, D))
    if solver == "amsa":
        if f0 is not None:
            f[:] = as_stack(f0, system.dims).flat
        elif f_init == "sample":
            f[:] = system.evaluate_flat(theta, x)
        elif f_init != "zero":
            raise ValueError(f"unknown f_init {f_init!r}")
    rngs = [np.random.default_rng(s) for s in seeds]
    rec_t = record_times(record_plan, horizon)
    R = rec_t.size
    thetas = np.empty((R, B, D))
    fs = np.empty((R, B, D))
    states = np.empty((R, B), dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    div_t = np.full(B, -1, dtype=np.int64)
    div_level = np.zeros(B, dtype=np.int64)
    lvl = _level_index(system)
    cap2 = divergence_cap**2
    ri = 0
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while t <= horizon:
            t1 = min(t + CHUNK, horizon + 1)
            steps = np.arange(t, t1)
            U = np.stack([r.random((t1 - t, k)) for r in rngs], axis=1)
            A = schedule.alphas(steps)[:, lvl]
            if solver == "amsa":
                L = (np.array([lambda_fn(int(s)) for s in steps]) if lambda_fn
                     else schedule.lam(steps))
            for j, s in enumerate(steps):
                if ri < R and rec_t[ri] == s:
                    thetas[ri], fs[ri], states[ri] = theta, f, x
                    ri += 1
                if s == horizon:
                    break
                F = system.evaluate_flat(theta, x)
                x_new = kernel.draw_batch(theta, x, U[j])
                if solver == "amsa":
                    theta = theta - A[j] * f
                    f = (1.0 - L[j]) * f + L[j] * F
                else:
                    theta = theta - A[j] * F
                system.project(theta)
                x = x_new
                bad = ~((theta * theta).sum(axis=1) <= cap2) | ~np.isfinite(f).all(axis=1)
                bad &= alive
                if bad.any():
                    for b in np.nonzero(bad)[0]:
                        div_t[b] = s + 1
                        div_level[b] = _first_bad_level(system, theta[b], f[b], divergence_cap)
                    alive &= ~bad
                    theta[bad] = 0.0
                    f[bad] = 0.0
            t = t1
    out = []
    for b, seed in enumerate(seeds):
        keep = slice(None) if alive[b] else rec_t < div_t[b]
        final = SolverState(int(horizon), ParameterStack.from_flat(theta[b], system.dims),
                            ParameterStack.from_flat(f[b], system.dims), int(x[b]), rngs[b]) \
            if alive[b] else None
        out.append(Trajectory(
            seed=seed, solver=solver, ts=rec_t[keep].copy(), thetas=thetas[keep, b].copy(),
            fs=fs[keep, b].copy(), states=states[keep, b].copy(), diverged=not alive[b],
            diverged_at=None if alive[b] else int(div_t[b]),
            diverged_level=None if alive[b] else int(div_level[b]), final=final))
    return out


def run(system, schedule, solver, horizon, seed, theta0=None, f0=None, x0=0, f_init="sample",
        record_plan="log", lambda_fn=None, divergence_cap=DIVERGENCE_CAP):
    """Single-trajectory :func:`run_batch`."""
    return run_batch(system, schedule, solver, horizon, [seed], theta0, f0, x0, f_init,
                     record_plan, lambda_fn, divergence_cap)[0]


def initial_state(system, seed, theta0=None, x0=0, f_init="sample", solver="amsa"):
    theta = system.initial_point() if theta0 is None else as_stack(theta0, system.dims).flat
    theta = theta.copy()[None, :]
    system.project(theta)
    f = np.zeros_like(theta)
    if solver == "amsa" and f_init == "sample":
        f = system.evaluate_flat(theta, np.array([x0]))
    return SolverState(0, ParameterStack.from_flat(theta[0], system.dims),
                       ParameterStack.from_flat(f[0], system.dims), int(x0),
                       np.random.default_rng(seed))


def _step(state, system, schedule, solver, lam=None, divergence_cap=DIVERGENCE_CAP):
    _check_schedule(system, schedule, solver)
    if state.theta.dims != system.dims or state.f.dims != system.dims:
        raise DimensionError(f"state dims {state.theta.dims} do not match system {system.dims}")
    if not 0 <= state.x_state < system.kernel.m:
        raise StateRangeError(f"state {state.x_state} outside [0, {system.kernel.m})")
    theta = state.theta.flat[None, :]
    f = state.f.flat[None, :]
    x = np.array([state.x_state])
    alpha = schedule.alphas(state.t)[_level_index(system)]
    F = system.evaluate_flat(theta, x)
    u = state.rng.random((1, system.kernel.uniforms_per_step))
    x_new = system.kernel.draw_batch(theta, x, u)
    with np.errstate(over="ignore", invalid="ignore"):
        if solver == "amsa":
            lam = schedule.lam(state.t) if lam is None else lam
            theta_new = theta - alpha * f
            f_new = (1.0 - lam) * f + lam * F
        else:
            theta_new = theta - alpha * F
            f_new = f
    system.project(theta_new)
    if not (theta_new * theta_new).sum() <= divergence_cap**2 or not np.isfinite(f_new).all():
        level = _first_bad_level(system, theta_new[0], f_new[0], divergence_cap)
        raise DivergenceError("iterate diverged", t=state.t + 1, level=level)
    return SolverState(state.t + 1, ParameterStack.from_flat(theta_new[0], system.dims),
                       ParameterStack.from_flat(f_new[0], system.dims), int(x_new[0]), state.rng)


def amsa_step(state, system, schedule, lam=None):
    """One A-MSA iteration: decision update, estimate update, then sample draw.

    The operator and the kernel are both evaluated at the pre-update theta.
    """
    return _step(state, system, schedule, "amsa", lam)


def msa_step(state, system, schedule):
    """One MSA iteration: every level steps along the same raw sample."""
    return _step(state, system, schedule, "msa")


def trajectory_rows(traj, system, diagnostics=None):
    """Rows ``(t, level, quantity, value)`` for the trajectory CSV dump."""
    rows = []
    diag = {d.t: d for d in (diagnostics or [])}
    for r, t in enumerate(traj.ts):
        th, f = traj.thetas[r], traj.fs[r]
        for i in range(1, system.n_levels + 1):
            sl = system.level_slice(i)
            rows.append((int(t), i, "theta_norm", float(np.linalg.norm(th[sl]))))
            rows.append((int(t), i, "f_norm", float(np.linalg.norm(f[sl]))))
            if int(t) in diag:
                rows.append((int(t), i, "x_norm", diag[int(t)].x_norms[i - 1]))
                rows.append((int(t), i, "df_norm", diag[int(t)].df_norms[i - 1]))
        if int(t) in diag:
            rows.append((int(t), 0, "V", diag[int(t)].V))
            if diag[int(t)].weighted_V is not None:
                rows.append((int(t), 0, "weighted_V", diag[int(t)].weighted_V))
    return rows
