"""Step-size schedules for A-MSA and MSA, the step-size condition checker and
theoretical rate predictions.

A-MSA uses ``lambda_t = c_lambda / (t + h + 1)`` and ``alpha_i,t = c_i / (t + h + 1)``.
MSA uses ``alpha_i,t = c_i / (t + h + 1) ** a_i`` with non-increasing ``a_i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ScheduleError, UnsupportedError

D_CAVEAT = ("D has no closed form; the tau row and the D-dependent ratio caps "
            "are only as trustworthy as the supplied D")


@dataclass(frozen=True)
class StepSchedule:
    kind: str
    n_levels: int
    h: float
    c: tuple
    c_lambda: float | None = None
    exponents: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "c", tuple(float(x) for x in self.c))
        if self.kind not in ("amsa", "msa"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.n_levels < 1 or len(self.c) != self.n_levels:
            raise ScheduleError(f"need {self.n_levels} step constants, got {len(self.c)}")
        if self.h < 0 or min(self.c) <= 0:
            raise ScheduleError("h must be >= 0 and every c_i positive")
        if self.kind == "amsa":
            if self.c_lambda is None or self.c_lambda <= 0:
                raise ScheduleError("amsa schedules need a positive c_lambda")
            object.__setattr__(self, "exponents", (1.0,) * self.n_levels)
        else:
            exps = self.exponents
            if exps is None:
                exps = optimal_msa_exponents(self.n_levels)
            exps = tuple(float(a) for a in exps)
            if len(exps) != self.n_levels or any(not 0 < a <= 1 for a in exps):
                raise ScheduleError(f"msa exponents must lie in (0, 1], got {exps}")
            if any(a < b for a, b in zip(exps, exps[1:])):
                raise ScheduleError(f"msa exponents must be non-increasing, got {exps}")
            object.__setattr__(self, "exponents", exps)

    def alphas(self, t):
        """``alpha_i`` at ``t``; shape ``(N,)`` for scalar t, ``(len(t), N)`` otherwise."""
        base = np.asarray(t, dtype=float)[..., None] + self.h + 1.0
        return np.asarray(self.c) / base ** np.asarray(self.exponents)

    def lam(self, t):
        if self.kind != "amsa":
            raise ScheduleError("lambda is only defined for amsa schedules")
        return self.c_lambda / (np.asarray(t, dtype=float) + self.h + 1.0)

    def to_dict(self):
        d = asdict(self)
        d["c"] = list(self.c)
        d["exponents"] = list(self.exponents)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], n_levels=int(d["n_levels"]), h=float(d["h"]),
                   c=tuple(d["c"]), c_lambda=d.get("c_lambda"),
                   exponents=tuple(d["exponents"]) if d.get("exponents") is not None else None)

    def to_json(self):
        return json.dumps(self.to_dict())


def amsa_stepsizes(schedule, t):
    if schedule.kind != "amsa":
        raise ScheduleError("amsa_stepsizes needs an amsa schedule")
    if t < 0:
        raise ScheduleError(f"t must be >= 0, got {t}")
    return float(schedule.lam(t)), [float(a) for a in schedule.alphas(t)]


def msa_stepsizes(schedule, t):
    if schedule.kind != "msa":
        raise ScheduleError("msa_stepsizes needs an msa schedule")
    return [float(a) for a in schedule.alphas(t)]


def optimal_msa_exponents(N):
    """``a_i = (N + 2 - i) / (N + 1)`` as exact fractions."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return tuple(Fraction(N + 2 - i, N + 1) for i in range(1, N + 1))


def predict_msa_rate(N):
    """Exponent r with the MSA Lyapunov value decaying as ``t ** -r``."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return Fraction(2, N + 1)


def predict_amsa_rate(N):
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return Fraction(1)


def msa_lyapunov_weights(schedule, t, delta, L):
    """Weights ``(v2, v3)`` of the three-level MSA Lyapunov function."""
    if schedule.kind != "msa":
        raise ScheduleError("weights need an msa schedule")
    if schedule.n_levels != 3:
        raise UnsupportedError("weights are defined for three-level MSA only")
    a1, a2, a3 = np.moveaxis(schedule.alphas(t), -1, 0)
    return lyapunov_weights_from_steps(a1, a2, a3, delta, L)


def lyapunov_weights_from_steps(a1, a2, a3, delta, L):
    v2 = 1728.0 * L**6 * a1 / (delta**2 * a2)
    v3 = (8.0 * a1 / (delta * a3)) * (216.0 * L**6 / delta + 373248.0 * L**12 / delta**3)
    return v2, v3


# ---------------------------------------------------------------------------
# condition block


@dataclass
class ConditionReport:
    rows: list
    caveat: str = D_CAVEAT
    constants: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(r["pass"] for r in self.rows)

    def failing(self):
        return [r["name"] for r in self.rows if not r["pass"]]

    def to_dict(self):
        return {"pass": self.passed, "rows": self.rows, "caveat": self.caveat,
                "constants": self.constants}


def condition_bounds(delta, L, N, D=1.0):
    """Right-hand sides of the t-independent A-MSA caps."""
    alpha_cap = min(delta**2 / (80 * N**8 * L**6), delta / (40 * N**5 * L**6),
                    2.0 / (5 * N * L**2), 1.0 / delta)
    ratio_lambda = min(1.0 / (8 * (D * N**3 + 3.0 / delta + L)), delta / (32 * D * N**3),
                       delta / (32 * (9 * N**4 * L**6 / delta + 8 * N**3 * L**3)), 16.0 / delta)
    ratio_levels = (delta / 16.0) / (9 * N**3 * L**3 / 2.0 + 4 * N**6 * L**6 / delta)
    sq_ratio = min(delta**1.5 / (64 * N**7), 8.0 / (5 * N**3 * L**3))
    tau_cap = 1.0 / (8 * D * N**3)
    return {"alpha": alpha_cap, "alpha_over_lambda": ratio_lambda,
            "alpha_prev_over_alpha": ratio_levels, "alpha_sq_over_alpha1": sq_ratio,
            "tau": tau_cap}


def _grid(horizon, n=200):
    pts = np.unique(np.concatenate([[0], np.logspace(0, math.log10(max(horizon, 1)), n).astype(np.int64)]))
    return pts[pts <= horizon]


def _row(name, t, lhs, rhs):
    lhs = np.broadcast_to(np.asarray(lhs, dtype=float), t.shape)
    ok = lhs <= rhs * (1 + 1e-12)
    worst = int(np.argmax(lhs - rhs))
    first = None
    if ok[-1]:
        bad = np.nonzero(~ok)[0]
        first = int(t[bad[-1] + 1]) if bad.size else int(t[0])
    return {"name": name, "worst_t": int(t[worst]), "lhs": float(lhs[worst]), "rhs": float(rhs),
            "pass": bool(ok.all()), "first_pass_t": first}


def constant_tau(value=1):
    return lambda t: value


def certificate_tau(certificate, schedule):
    """``t -> tau(lambda_t)`` from an ergodicity certificate."""
    def tau(t):
        a = min(float(schedule.lam(t)), 0.5)
        return max(1, certificate.tau(a))
    return tau


def check_amsa_conditions(schedule, delta, L, D=1.0, tau_fn=None, horizon=10**5):
    """Evaluate the full A-MSA step-size condition block.

    Caps are checked on a log-spaced grid over ``[0, horizon]`` (t = 0 is the
    worst case for the monotone rows). ``tau_fn`` maps t to the mixing time
    used at t; it defaults to 1 (i.i.d. sampling). Failures are reported,
    never raised.
    """
    if schedule.kind != "amsa":
        raise ScheduleError("condition block applies to amsa schedules")
    if delta > 1:
        raise ScheduleError(f"delta must be <= 1 (rescale the system), got {delta}")
    if horizon < 1:
        raise ScheduleError("horizon must be >= 1")
    tau_fn = tau_fn or constant_tau(1)
    N = schedule.n_levels
    b = condition_bounds(delta, L, N, D)
    t = _grid(horizon)
    lam = schedule.lam(t)
    alphas = schedule.alphas(t)
    rows = []
    c1_target = 32.0 / delta
    rows.append({"name": "c1 = 32/delta", "worst_t": 0, "lhs": schedule.c[0], "rhs": c1_target,
                 "pass": bool(abs(schedule.c[0] - c1_target) <= 1e-12 * c1_target),
                 "first_pass_t": None})
    rows.append(_row("lambda <= 1/4", t, lam, 0.25))
    taus = np.array([tau_fn(int(s)) for s in t], dtype=float)
    lagged = schedule.lam(np.maximum(t - taus, 0))
    rows.append(_row("tau^2 lambda_(t-tau) <= 1/(8DN^3)", t, taus**2 * lagged, b["tau"]))
    for i in range(N):
        rows.append(_row(f"alpha_{i+1} cap", t, alphas[:, i], b["alpha"]))
    for i in range(N):
        rows.append(_row(f"alpha_{i+1}/lambda cap", t, alphas[:, i] / lam, b["alpha_over_lambda"]))
    for i in range(1, N):
        rows.append(_row(f"alpha_{i}/alpha_{i+1} cap", t, alphas[:, i - 1] / alphas[:, i],
                         b["alpha_prev_over_alpha"]))
    for i in range(N):
        rows.append(_row(f"alpha_{i+1}^2/alpha_1 cap", t, alphas[:, i] ** 2 / alphas[:, 0],
                         b["alpha_sq_over_alpha1"]))
    caveat = D_CAVEAT
    if L < 1:
        caveat += "; L < 1 weakens several caps, L >= 1 is recommended"
    return ConditionReport(rows=rows, caveat=caveat,
                           constants={"delta": delta, "L": L, "D": D, "N": N, "horizon": horizon})


def compliant_amsa_schedule(N, delta, L, D=1.0, tau_fn_factory=None, horizon=10**5):
    """Smallest-effort schedule passing every row of the condition block.

    Level ratios sit at half their caps; ``h`` is doubled until the
    t-dependent rows pass. The resulting steps are tiny.
    """
    if delta > 1:
        raise ScheduleError(f"delta must be <= 1, got {delta}")
    b = condition_bounds(delta, L, N, D)
    c = [32.0 / delta]
    for _ in range(1, N):
        c.append(c[-1] / (0.5 * b["alpha_prev_over_alpha"]))
    c_lambda = c[-1] / (0.5 * b["alpha_over_lambda"])
    h = 1.0
    for _ in range(200):
        sched = StepSchedule("amsa", N, h, tuple(c), c_lambda)
        tau_fn = tau_fn_factory(sched) if tau_fn_factory else None
        if check_amsa_conditions(sched, delta, L, D, tau_fn, horizon).passed:
            return sched
        h *= 2.0
    raise ScheduleError("no compliant h found")


def practical_amsa_schedule(N, delta, ratio=2.0, lam0=0.25):
    """Relaxed A-MSA schedule for desk-scale runs.

    Keeps ``c_1 = 32/delta`` exact, doubles ``c_i`` per level, sets
    ``lambda/alpha_N = ratio`` and picks ``h`` so that ``lambda_0 = lam0``.
    """
    if ratio < 2:
        raise ScheduleError("practical schedules keep lambda/alpha >= 2")
    c = [32.0 / delta * 2.0**i for i in range(N)]
    c_lambda = ratio * c[-1]
    h = c_lambda / lam0 - 1.0
    return StepSchedule("amsa", N, h, tuple(c), c_lambda)


def practical_msa_schedule(N, delta, exponents=None, alpha0_fast=0.5, growth=2.0):
    """Relaxed MSA schedule sharing the A-MSA anchor ``c_1 = 32/delta``.

    ``h`` is set so the fastest level starts at ``alpha0_fast``; the
    initial steps grow by ``growth`` per level.
    """
    exps = [float(a) for a in (exponents or optimal_msa_exponents(N))]
    c1 = 32.0 / delta
    start = [alpha0_fast / growth ** (N - 1 - i) for i in range(N)]
    h = c1 / start[0] - 1.0
    c = [start[i] * (h + 1.0) ** exps[i] for i in range(N)]
    c[0] = c1
    return StepSchedule("msa", N, h, tuple(c), None, tuple(exps))


def schedule_from_dict(d):
    return StepSchedule.from_dict(d)
