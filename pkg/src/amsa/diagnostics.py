"""Learning targets, residuals, Lyapunov values and assumption validators.

Targets ``y_j(theta_1..theta_{i-1})`` solve ``F_bar_j(prefix, y_i..y_N) = 0`` for
``j >= i``. For systems whose mean operator is globally affine they are an
affine map of the prefix and are computed by a direct block solve; otherwise
by damped deterministic iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .core import as_stack, rowwise_matmul
from .errors import DegeneracyError, NonConvergenceError, ScheduleError, UnsupportedError
from .schedules import check_amsa_conditions, msa_lyapunov_weights

TARGET_TOL = 1e-9
MAX_FIXED_POINT_ITERS = 100_000
EPS = np.finfo(float).eps


@dataclass
class NestedTargets:
    given_prefix_len: int
    targets: list
    residual_norms: list

    @property
    def flat(self):
        return np.concatenate(self.targets)


@dataclass
class DiagnosticsRecord:
    t: int
    x_norms: list
    df_norms: list
    V: float
    weighted_V: float | None = None
    kind: str = "amsa"


@dataclass
class AssumptionEstimates:
    delta_hat: float
    L_hat: float
    B_hat: float
    D_bound: float
    details: dict = field(default_factory=dict)


def _prefix_flat(system, prefix):
    if prefix is None:
        return np.zeros(0)
    if isinstance(prefix, np.ndarray) and prefix.ndim == 1:
        return prefix.astype(float)
    blocks = [np.asarray(b, dtype=float).ravel() for b in prefix]
    if not blocks:
        return np.zeros(0)
    as_stack(blocks, system.dims[:len(blocks)])
    return np.concatenate(blocks)


def _prefix_levels(system, n_coords):
    hits = np.nonzero(system.offsets == n_coords)[0]
    if hits.size == 0 or hits[0] >= system.n_levels + 1 or n_coords == system.D:
        raise ValueError(f"prefix of {n_coords} coordinates does not end on a level boundary below N")
    return int(hits[0])


class AffineTargets:
    """Precomputed affine target maps ``y_{i:N}(p) = K_i p + k_i`` for each level i."""

    def __init__(self, system):
        struct = system.affine_structure()
        if struct is None:
            raise UnsupportedError("system mean operator is not globally affine")
        A, c = struct
        self.system = system
        self.A, self.c = A, c
        self.maps = []
        for i in range(1, system.n_levels + 1):
            p = system.offsets[i - 1]
            A_rr = A[p:, p:]
            cond = np.linalg.cond(A_rr)
            if not np.isfinite(cond) or cond > 1e14:
                raise DegeneracyError(f"stacked block for levels {i}..N is singular (cond {cond:.3g})")
            K = -np.linalg.solve(A_rr, A[p:, :p]) if p else np.zeros((system.D - p, 0))
            k = -np.linalg.solve(A_rr, c[p:])
            self.maps.append((K, k))

    def targets(self, prefix_flat):
        i = _prefix_levels(self.system, prefix_flat.size) + 1
        K, k = self.maps[i - 1]
        y = K @ prefix_flat + k if prefix_flat.size else k.copy()
        return i, y

    def x_batch(self, thetas):
        """Residuals ``x_i`` for a ``(B, D)`` batch, as a list of ``(B, d_i)`` arrays."""
        sys_ = self.system
        out = []
        for i in range(1, sys_.n_levels + 1):
            K, k = self.maps[i - 1]
            d = sys_.dims[i - 1]
            p = sys_.offsets[i - 1]
            y = k[:d] + (rowwise_matmul(thetas[:, :p], K[:d]) if p else 0.0)
            out.append(thetas[:, sys_.level_slice(i)] - y)
        return out

    def mean_batch(self, thetas):
        return rowwise_matmul(thetas, self.A) + self.c


def _mean_rest(system, prefix_flat, y):
    return system.mean_operator_flat(np.concatenate([prefix_flat, y]))[prefix_flat.size:]


def _level_norms(system, first_level, vec):
    norms = []
    start = 0
    for d in system.dims[first_level - 1:]:
        norms.append(float(np.linalg.norm(vec[start:start + d])))
        start += d
    return norms


def _fixed_point(system, prefix_flat, first_level, tol, eta=None, y0=None, max_iter=MAX_FIXED_POINT_ITERS):
    meta = system.metadata
    N_rest = system.n_levels - first_level + 1
    if eta is None:
        delta = float(meta.get("delta", 0.1))
        L = max(float(meta.get("lipschitz", 1.0)), 1e-12)
        eta = delta / (N_rest * L * L)
    if y0 is None:
        sol = system.solution
        y0 = sol[prefix_flat.size:] if sol is not None else np.zeros(system.D - prefix_flat.size)
    y = np.array(y0, dtype=float)
    r = _mean_rest(system, prefix_flat, y)
    best_y, best_r = y.copy(), float(np.linalg.norm(r))
    for _ in range(max_iter):
        norms = _level_norms(system, first_level, r)
        if max(norms) <= tol:
            return y, norms
        y = y - eta * r
        r = _mean_rest(system, prefix_flat, y)
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn) or rn > 10.0 * best_r:
            y, eta = best_y.copy(), eta / 2.0
            r = _mean_rest(system, prefix_flat, y)
            continue
        if rn < best_r:
            best_y, best_r = y.copy(), rn
    raise NonConvergenceError(f"fixed-point target solve stalled at residual {best_r:.3g}",
                              residuals=_level_norms(system, first_level, r))


def affine_targets(system):
    """Cached :class:`AffineTargets` of an immutable system."""
    cached = system.__dict__.get("_affine_targets")
    if cached is None:
        cached = AffineTargets(system)
        system.__dict__["_affine_targets"] = cached
    return cached


def solve_nested_targets(system, prefix, tol=TARGET_TOL, mode="auto", eta=None):
    """Targets ``y_i..y_N`` of the bottom equations given ``prefix = theta_1..theta_{i-1}``."""
    p = _prefix_flat(system, prefix)
    first = _prefix_levels(system, p.size) + 1
    if mode == "auto":
        mode = "affine-direct" if system.affine_structure() is not None else "fixed-point"
    if mode == "affine-direct":
        _, y = affine_targets(system).targets(p)
        norms = _level_norms(system, first, _mean_rest(system, p, y))
    elif mode == "fixed-point":
        y, norms = _fixed_point(system, p, first, tol, eta)
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    blocks = [y[system.offsets[j - 1] - p.size:system.offsets[j] - p.size]
              for j in range(first, system.n_levels + 1)]
    return NestedTargets(first - 1, blocks, norms)


def verify_target_identity(system, prefix, i, j, tol=1e-7, mode="auto"):
    """Check ``y_j(prefix) == y_j(prefix, y_i..y_{j-1}(prefix))``."""
    if not 1 <= i < j <= system.n_levels:
        raise ValueError(f"need 1 <= i < j <= N, got i={i}, j={j}")
    p = _prefix_flat(system, prefix)
    if p.size != system.offsets[i - 1]:
        raise ValueError(f"prefix must hold levels 1..{i - 1}")
    lhs = solve_nested_targets(system, p, mode=mode)
    ext = np.concatenate([p] + lhs.targets[:j - i])
    rhs = solve_nested_targets(system, ext, mode=mode)
    return bool(np.linalg.norm(lhs.targets[j - i] - rhs.targets[0]) <= tol)


def _x_single(system, theta, mode="auto"):
    xs = []
    for i in range(1, system.n_levels + 1):
        p = theta[:system.offsets[i - 1]]
        y = solve_nested_targets(system, p, mode=mode).targets[0]
        xs.append(theta[system.level_slice(i)] - y)
    return xs


def residuals(state, system, tol=TARGET_TOL, kind="amsa", t=None):
    """Residual norms and the Lyapunov value at a solver state.

    ``state`` is a :class:`SolverState` or a ``(theta, f)`` pair. For MSA the
    Lyapunov value covers the decision residuals only.
    """
    if hasattr(state, "theta"):
        theta, f, t = state.theta, state.f, state.t if t is None else t
    else:
        theta, f = state
    theta = as_stack(theta, system.dims).flat
    f = as_stack(f, system.dims).flat
    xs = _x_single(system, theta)
    df = f - system.mean_operator_flat(theta)
    x_norms = [float(np.linalg.norm(x)) for x in xs]
    df_norms = [float(np.linalg.norm(d)) for d in system.split(df)]
    V = sum(v * v for v in x_norms)
    if kind == "amsa":
        V += sum(v * v for v in df_norms)
    return DiagnosticsRecord(t=0 if t is None else int(t), x_norms=x_norms, df_norms=df_norms,
                             V=float(V), kind=kind)


def batch_residual_norms(system, thetas, fs):
    """``(x_norms, df_norms)`` arrays of shape ``(B, N)`` for a batch of states."""
    N = system.n_levels
    try:
        at = affine_targets(system)
    except UnsupportedError:
        at = None
    if at is not None:
        xs = at.x_batch(thetas)
        means = at.mean_batch(thetas)
        x_norms = np.stack([np.sqrt((x * x).sum(axis=1)) for x in xs], axis=1)
    else:
        x_norms = np.empty((thetas.shape[0], N))
        means = np.empty_like(thetas)
        for b, th in enumerate(thetas):
            x_norms[b] = [np.linalg.norm(x) for x in _x_single(system, th)]
            means[b] = system.mean_operator_flat(th)
    df = fs - means
    df_norms = np.stack([np.sqrt((d * d).sum(axis=1)) for d in system.split(df)], axis=1)
    return x_norms, df_norms


def trajectory_diagnostics(traj, system, schedule=None, delta=None, L=None):
    """:class:`DiagnosticsRecord` for every recorded iteration of a trajectory."""
    x_norms, df_norms = batch_residual_norms(system, traj.thetas, traj.fs)
    out = []
    for r, t in enumerate(traj.ts):
        V = float((x_norms[r] ** 2).sum())
        if traj.solver == "amsa":
            V += float((df_norms[r] ** 2).sum())
        rec = DiagnosticsRecord(int(t), x_norms[r].tolist(), df_norms[r].tolist(), V, kind=traj.solver)
        if traj.solver == "msa" and system.n_levels == 3 and schedule is not None and delta:
            rec.weighted_V = weighted_msa_lyapunov(rec, int(t), schedule, delta, L)
        out.append(rec)
    return out


def weighted_msa_lyapunov(record, t, schedule, delta, L):
    """``||x_1||^2 + v2 ||x_2||^2 + v3 ||x_3||^2`` for one trajectory."""
    if schedule.n_levels != 3 or len(record.x_norms) != 3:
        raise UnsupportedError("weighted Lyapunov value is defined for three levels only")
    v2, v3 = msa_lyapunov_weights(schedule, t, delta, L)
    return weighted_value(record.x_norms, v2, v3)


def weighted_value(x_norms, v2, v3):
    x1, x2, x3 = x_norms
    return float(x1 * x1 + v2 * x2 * x2 + v3 * x3 * x3)


# ---------------------------------------------------------------------------
# assumption estimates


def effective_matrices(system):
    """Schur complements ``M_i`` mapping ``theta_i`` to ``F_bar_i`` with lower targets substituted."""
    struct = system.affine_structure()
    if struct is None:
        raise UnsupportedError("effective matrices need a globally affine mean operator")
    A = struct[0]
    out = []
    for i in range(1, system.n_levels + 1):
        sl = system.level_slice(i)
        lo = system.offsets[i]
        M = A[sl, sl].copy()
        if lo < system.D:
            A_ll = A[lo:, lo:]
            if np.linalg.cond(A_ll) > 1e14:
                raise DegeneracyError(f"lower block below level {i} is singular")
            M -= A[sl, lo:] @ np.linalg.solve(A_ll, A[lo:, sl])
        out.append(M)
    return out


def level_deltas(system):
    return [float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]) for M in effective_matrices(system)]


def estimate_nested_delta(system, theta_samples=None, pair_count=20, tol=TARGET_TOL, seed=0, radius=5.0):
    """Nested strong-monotonicity modulus.

    Affine mean operators give the exact value ``min_i lambda_min(sym(M_i))``;
    otherwise the minimum Rayleigh quotient over random pairs per level.
    """
    if system.affine_structure() is not None:
        return min(level_deltas(system))
    rng = np.random.default_rng(seed)
    if theta_samples is None:
        centre = system.solution if system.solution is not None else system.initial_point()
        theta_samples = centre + rng.uniform(-radius, radius, size=(4, system.D))
    theta_samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    best = math.inf
    for i in range(1, system.n_levels + 1):
        sl = system.level_slice(i)
        lo = system.offsets[i]
        for k in range(pair_count):
            base = theta_samples[k % len(theta_samples)]
            prefix = base[:system.offsets[i - 1]]
            a = base[sl] + rng.normal(size=system.dims[i - 1])
            b = a + rng.normal(size=system.dims[i - 1])
            vals = []
            for th_i in (a, b):
                head = np.concatenate([prefix, th_i])
                tail = (solve_nested_targets(system, head, tol).flat if lo < system.D else np.zeros(0))
                vals.append(system.mean_operator_flat(np.concatenate([head, tail]))[sl])
            diff = a - b
            best = min(best, float(np.dot(vals[0] - vals[1], diff) / np.dot(diff, diff)))
    return best


def _grid_points(system, grid_spec):
    if isinstance(grid_spec, np.ndarray):
        return np.atleast_2d(grid_spec)
    spec = dict(grid_spec or {})
    rng = np.random.default_rng(spec.get("seed", 0))
    centre = system.solution if system.solution is not None else system.initial_point()
    r = float(spec.get("radius", 5.0))
    return centre + rng.uniform(-r, r, size=(int(spec.get("n_points", 50)), system.D))


def _block_sum_norm(system, diff):
    return sum(np.linalg.norm(b) for b in system.split(diff))


def estimate_lipschitz_bounds(system, grid_spec=None):
    """Sampled ``(L_hat, B_hat, D_bound)`` over a grid of parameter points.

    ``grid_spec`` is an explicit ``(n, D)`` array or a dict with ``n_points``,
    ``radius`` and ``seed`` (a box around the stored solution).
    """
    pts = _grid_points(system, grid_spec)
    m = system.sample_space_size
    states = np.arange(m)
    vals = [system.evaluate_flat(np.broadcast_to(p, (m, system.D)).copy(), states) for p in pts]
    D_bound = 0.0
    for v in vals:
        for blk in system.split(v):
            D_bound = max(D_bound, float(np.linalg.norm(blk, axis=1).max()))
    L_hat = 0.0
    for a in range(len(pts) - 1):
        dist = _block_sum_norm(system, pts[a] - pts[a + 1])
        if dist == 0:
            continue
        for blk in system.split(vals[a] - vals[a + 1]):
            L_hat = max(L_hat, float(np.linalg.norm(blk, axis=1).max()) / dist)
    B_hat = 0.0
    targets_ok = True
    try:
        for a, p in enumerate(pts):
            for i in range(1, system.n_levels + 1):
                pre = p[:system.offsets[i - 1]]
                y = solve_nested_targets(system, pre).flat
                B_hat = max(B_hat, float(np.linalg.norm(y[:system.dims[i - 1]])))
                if i > 1 and a + 1 < len(pts):
                    pre2 = pts[a + 1][:system.offsets[i - 1]]
                    y2 = solve_nested_targets(system, pre2).flat
                    dist = _block_sum_norm(system, np.concatenate(
                        [pre - pre2, np.zeros(system.D - pre.size)]))
                    if dist > 0:
                        for blk in system.split(np.concatenate([pre, y]) - np.concatenate([pre2, y2])):
                            L_hat = max(L_hat, float(np.linalg.norm(blk)) / dist)
    except (DegeneracyError, NonConvergenceError):
        targets_ok = False
    est = LipschitzEstimates(L_hat, B_hat, D_bound)
    est.targets_available = targets_ok
    return est


class LipschitzEstimates(tuple):
    """``(L_hat, B_hat, D_bound)`` with attribute access."""

    def __new__(cls, L_hat, B_hat, D_bound):
        obj = super().__new__(cls, (float(L_hat), float(B_hat), float(D_bound)))
        obj.targets_available = True
        return obj

    L_hat = property(lambda self: self[0])
    B_hat = property(lambda self: self[1])
    D_bound = property(lambda self: self[2])


def exact_affine_constants(system, radius=10.0, n_points=200, seed=0):
    """Constants for a fixed-kernel affine system.

    ``L`` covers the per-sample operator blocks, the target Jacobian blocks,
    ``max ||F_i(0, X)||`` and 1. ``B`` is sampled over a box of half-width
    ``radius`` around the solution, since affine targets are unbounded
    globally.
    """
    N = system.n_levels
    block = max(np.linalg.norm(system.block(i, j), 2) for i in range(1, N + 1) for j in range(1, N + 1))
    at = affine_targets(system)
    jac = 0.0
    for i in range(2, N + 1):
        K, _ = at.maps[i - 1]
        for r in range(i, N + 1):
            rs = slice(system.offsets[r - 1] - system.offsets[i - 1], system.offsets[r] - system.offsets[i - 1])
            for c in range(1, i):
                jac = max(jac, np.linalg.norm(K[rs, system.level_slice(c)], 2))
    m = system.sample_space_size
    F0 = system.evaluate_flat(np.zeros((m, system.D)), np.arange(m))
    f0 = max(float(np.linalg.norm(b, axis=1).max()) for b in system.split(F0))
    L = max(1.0, float(block), float(jac), f0)
    rng = np.random.default_rng(seed)
    pts = system.solution + rng.uniform(-radius, radius, size=(n_points, system.D))
    B = 0.0
    for p in pts:
        for i in range(1, N + 1):
            _, y = at.targets(p[:system.offsets[i - 1]])
            B = max(B, float(np.linalg.norm(y[:system.dims[i - 1]])))
    return {"lipschitz": L, "target_bound": B, "target_bound_radius": radius}


ASSUMPTION_SCHEMA = {
    "type": "object",
    "required": ["delta_hat", "L_hat", "B_hat", "D_bound", "checks"],
    "properties": {
        "delta_hat": {"type": "number"},
        "L_hat": {"type": "number", "minimum": 0},
        "B_hat": {"type": "number", "minimum": 0},
        "D_bound": {"type": "number", "minimum": 0},
        "checks": {"type": "object"},
    },
}


def assumption_report(system, grid_spec=None, schedule=None, D=1.0, tau_fn=None, horizon=10**5):
    """Assumption estimates plus optional step-size conditions as a JSON-ready dict."""
    from .samplers import fit_ergodicity

    delta_hat = estimate_nested_delta(system)
    est = estimate_lipschitz_bounds(system, grid_spec)
    checks = {
        "delta_positive": delta_hat > 0,
        "sampled_region": grid_spec if isinstance(grid_spec, dict) else {"n_points": 50, "radius": 5.0},
        "global_claim": system.affine_structure() is not None,
        "targets_available": est.targets_available,
    }
    L_meta = system.metadata.get("lipschitz")
    if L_meta is not None:
        sol = system.solution if system.solution is not None else system.initial_point()
        checks["affine_bound_at_solution"] = bool(_affine_ok(system, sol, L_meta))
    try:
        cert = fit_ergodicity(system.kernel, system.solution)
        checks["ergodicity"] = {"m_const": cert.m_const, "rho": cert.rho, "c_mixing": cert.c_mixing}
    except Exception as exc:  # noqa: BLE001 - any failure is reported, not raised
        checks["ergodicity"] = {"error": str(exc)}
    if schedule is not None and schedule.kind == "amsa":
        delta = min(1.0, float(system.metadata.get("delta", delta_hat)))
        L = float(system.metadata.get("lipschitz", max(est.L_hat, 1.0)))
        checks["conditions"] = check_amsa_conditions(schedule, delta, L, D, tau_fn, horizon).to_dict()
    report = {"delta_hat": float(delta_hat), "L_hat": est.L_hat, "B_hat": est.B_hat,
              "D_bound": est.D_bound, "checks": checks}
    jsonschema.validate(report, ASSUMPTION_SCHEMA)
    return report


def _affine_ok(system, theta, L):
    from .core import check_affine_bound
    return check_affine_bound(system, theta, L).all()


# ---------------------------------------------------------------------------
# pathwise lemma checks


@dataclass
class LemmaReport:
    name: str
    rows: list
    preconditions_ok: bool
    note: str = ""

    @property
    def violations(self):
        return [r for r in self.rows if not r["pass"]]

    @property
    def passed(self):
        return not self.violations


def _consecutive(traj):
    ts = traj.ts
    if ts.size < 2 or np.any(np.diff(ts) != 1):
        raise ScheduleError("lemma checks need consecutive recorded iterations (use a dense record plan)")


def _tol(*terms):
    return 64 * EPS * sum(float(np.sum(np.abs(t))) for t in terms)


def check_lemma_lipschitz(traj, system, schedule, L, records=None):
    """``||theta_i' - theta_i|| <= alpha_i (||df_i|| + N L^2 sum_{k>=i} ||x_k||)`` per step."""
    if schedule.kind != "amsa":
        raise ScheduleError("the decision-step bound concerns A-MSA iterates")
    _consecutive(traj)
    records = records or trajectory_diagnostics(traj, system)
    N = system.n_levels
    rows = []
    for r in range(traj.ts.size - 1):
        t = int(traj.ts[r])
        alphas = schedule.alphas(t)
        x = np.asarray(records[r].x_norms)
        df = np.asarray(records[r].df_norms)
        for i in range(1, N + 1):
            sl = system.level_slice(i)
            lhs = float(np.linalg.norm(traj.thetas[r + 1, sl] - traj.thetas[r, sl]))
            rhs = float(alphas[i - 1] * (df[i - 1] + N * L * L * x[i - 1:].sum()))
            margin = rhs - lhs
            rows.append({"t": t, "level": i, "lhs": lhs, "rhs": rhs, "margin": margin,
                         "pass": margin >= -_tol(lhs, rhs)})
    return LemmaReport("decision-step bound", rows, True)


def check_lemma_bound_x(traj, system, schedule, delta, L, D=1.0, tau_fn=None, records=None):
    """Per-step contraction inequality for ``||x_i||^2`` along an A-MSA trajectory.

    Violations are reported with margins. If the step-size conditions fail
    the report says so instead of treating violations as errors.
    """
    if schedule.kind != "amsa":
        raise ScheduleError("the residual contraction bound concerns A-MSA iterates")
    _consecutive(traj)
    records = records or trajectory_diagnostics(traj, system)
    N = system.n_levels
    cond = check_amsa_conditions(schedule, min(delta, 1.0), L, D, tau_fn,
                                 horizon=max(int(traj.ts[-1]), 1))
    k_hi = 9 * N**3 * L**6 / delta + 8 * N**2 * L**3
    k_df = 3.0 / delta + L
    rows = []
    for r in range(traj.ts.size - 1):
        t = int(traj.ts[r])
        a = schedule.alphas(t)
        x2 = np.asarray(records[r].x_norms) ** 2
        df2 = float((np.asarray(records[r].df_norms) ** 2).sum())
        nxt = np.asarray(records[r + 1].x_norms) ** 2
        for i in range(N):
            terms = [x2[i], -delta * a[i] / 4 * x2[i],
                     float((delta * a[:i] / (8 * N) * x2[:i]).sum()),
                     k_hi * a[i] * float(x2[i + 1:].sum()), k_df * a[i] * df2]
            rhs = float(sum(terms))
            margin = rhs - float(nxt[i])
            rows.append({"t": t, "level": i + 1, "lhs": float(nxt[i]), "rhs": rhs, "margin": margin,
                         "pass": margin >= -_tol(nxt[i], *terms)})
    note = "" if cond.passed else (
        "step-size preconditions failed (" + ", ".join(cond.failing()) + "); violations are not errors")
    return LemmaReport("residual contraction bound", rows, cond.passed, note)
