"""Finite-state Markov kernels, total variation and mixing-time machinery.

Every kernel exposes the same small protocol used by the solvers:

* ``m`` -- number of states,
* ``uniforms_per_step`` -- how many U(0, 1) draws one transition consumes,
* ``draw_batch(theta, states, uniforms)`` -- vectorised inverse-CDF step,
* ``matrix(theta)`` -- dense row-stochastic matrix (small ``m`` only),
* ``stationary(theta)`` -- stationary distribution at ``theta``.

``theta`` is always the flat concatenation of all parameter blocks (or a
``(B, D)`` batch of them for ``draw_batch``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    DistributionError,
    ErgodicityError,
    KernelError,
    MixingTimeError,
    NonGeometricError,
    StateRangeError,
)

MAX_DENSE_STATES = 200
ROW_SUM_TOL = 1e-12
EIGEN_MARGIN = 1e-6


def _flat_theta(theta):
    if theta is None:
        return None
    if hasattr(theta, "flat"):
        return np.asarray(theta.flat, dtype=float)
    return np.asarray(theta, dtype=float).ravel()


def check_stochastic(P, tol=ROW_SUM_TOL):
    """Raise :class:`KernelError` unless ``P`` is row-stochastic."""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise KernelError(f"transition matrix must be square, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise KernelError("transition matrix has non-finite entries")
    if np.any(P < 0):
        raise KernelError(f"negative transition probability {P.min():.3g}")
    sums = P.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        row = int(np.argmax(bad))
        raise KernelError(f"row {row} sums to {sums[row]!r}, not 1")
    return P


def _inverse_cdf(rows, u):
    # smallest k with u < cdf[k]; the clip guards against cdf[-1] < 1 by rounding
    cdf = np.cumsum(rows, axis=1)
    idx = np.count_nonzero(cdf <= u[:, None], axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


class FiniteKernel:
    """Generic kernel built from a deterministic ``theta -> matrix`` map."""

    family = "custom"
    uniforms_per_step = 1

    def __init__(self, m, builder, is_fixed=False):
        if m < 1 or m > MAX_DENSE_STATES:
            raise KernelError(f"state count must be in [1, {MAX_DENSE_STATES}], got {m}")
        self.m = int(m)
        self._builder = builder
        self.is_fixed = is_fixed

    def matrix(self, theta=None):
        P = np.asarray(self._builder(_flat_theta(theta)), dtype=float)
        if P.shape != (self.m, self.m):
            raise KernelError(f"builder returned shape {P.shape}, expected {(self.m, self.m)}")
        return check_stochastic(P)

    def rows(self, theta_batch, states):
        return np.stack([self.matrix(th)[s] for th, s in zip(theta_batch, states)])

    def draw_batch(self, theta_batch, states, uniforms):
        return _inverse_cdf(self.rows(theta_batch, states), uniforms[:, 0])

    def stationary(self, theta=None):
        return stationary_distribution(self, theta)

    def stationary_batch(self, theta_batch):
        return np.stack([self.stationary(th) for th in theta_batch])

    def to_dict(self):
        raise NotImplementedError("custom kernels are not serialisable")


class FixedKernel(FiniteKernel):
    """A theta-independent kernel ``P``."""

    family = "fixed"

    def __init__(self, P):
        P = check_stochastic(np.array(P, dtype=float))
        super().__init__(P.shape[0], None, is_fixed=True)
        P.setflags(write=False)
        self.P = P

    @cached_property
    def _cdf(self):
        return np.cumsum(self.P, axis=1)

    @cached_property
    def _mu(self):
        return stationary_distribution(self)

    def matrix(self, theta=None):
        return self.P

    def rows(self, theta_batch, states):
        return self.P[states]

    def draw_batch(self, theta_batch, states, uniforms):
        idx = np.count_nonzero(self._cdf[states] <= uniforms[:, :1], axis=1)
        return np.minimum(idx, self.m - 1)

    def stationary(self, theta=None):
        return self._mu.copy()

    def stationary_batch(self, theta_batch):
        return np.broadcast_to(self._mu, (len(theta_batch), self.m))

    def to_dict(self):
        return {"m": self.m, "family": "fixed", "P": self.P.tolist()}


class MixtureKernel(FiniteKernel):
    """``P_theta = (1 - eps c(theta)) P_a + eps c(theta) P_b``.

    ``c(theta) = clip(w . theta + bias, 0, 1)`` is Lipschitz with constant
    ``||w||``, which makes the stationary distribution Lipschitz in theta.
    """

    family = "theta-mixture"

    def __init__(self, P_a, P_b, epsilon, clamp_weights, clamp_bias=0.0):
        P_a = check_stochastic(np.array(P_a, dtype=float))
        P_b = check_stochastic(np.array(P_b, dtype=float))
        if P_a.shape != P_b.shape:
            raise KernelError("P_a and P_b must have the same shape")
        if not 0.0 <= epsilon <= 1.0:
            raise KernelError(f"epsilon must lie in [0, 1], got {epsilon}")
        super().__init__(P_a.shape[0], self._build, is_fixed=(epsilon == 0.0))
        self.P_a, self.P_b = P_a, P_b
        self.epsilon = float(epsilon)
        self.clamp_weights = np.array(clamp_weights, dtype=float).ravel()
        self.clamp_bias = float(clamp_bias)

    def clamp(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.clamp_weights.size:
            raise KernelError(
                f"theta has {theta.shape[-1]} entries, clamp expects {self.clamp_weights.size}")
        z = (theta * self.clamp_weights).sum(axis=-1) + self.clamp_bias
        return np.clip(z, 0.0, 1.0)

    def _build(self, theta):
        if theta is None:
            theta = np.zeros(self.clamp_weights.size)
        w = self.epsilon * float(self.clamp(theta))
        return (1.0 - w) * self.P_a + w * self.P_b

    def matrix(self, theta=None):
        return self._build(_flat_theta(theta))

    def rows(self, theta_batch, states):
        w = self.epsilon * self.clamp(theta_batch)
        return (1.0 - w)[:, None] * self.P_a[states] + w[:, None] * self.P_b[states]

    def draw_batch(self, theta_batch, states, uniforms):
        return _inverse_cdf(self.rows(theta_batch, states), uniforms[:, 0])

    def lipschitz_constant(self):
        """A constant valid for both kernel regularity conditions.

        Row perturbations are bounded by ``eps ||w|| max_x TV(P_a[x], P_b[x])``;
        the stationary distribution moves by at most that over ``1 - kappa``,
        where ``kappa`` is the larger Dobrushin coefficient of ``P_a`` and ``P_b``.
        """
        row = self.epsilon * np.linalg.norm(self.clamp_weights) * max_row_tv(self.P_a, self.P_b)
        kappa = max(dobrushin(self.P_a), dobrushin(self.P_b))
        if kappa >= 1.0:
            return math.inf
        return row / (1.0 - kappa)

    def to_dict(self):
        return {
            "m": self.m,
            "family": "theta-mixture",
            "P_a": self.P_a.tolist(),
            "P_b": self.P_b.tolist(),
            "epsilon": self.epsilon,
            "clamp_weights": self.clamp_weights.tolist(),
            "clamp_bias": self.clamp_bias,
        }


_KERNEL_LOADERS = {}


def register_kernel(family, loader):
    _KERNEL_LOADERS[family] = loader


def kernel_from_dict(d):
    family = d.get("family", "fixed")
    if family == "fixed":
        return FixedKernel(d["P"])
    if family == "theta-mixture":
        return MixtureKernel(d["P_a"], d["P_b"], d["epsilon"], d["clamp_weights"],
                             d.get("clamp_bias", 0.0))
    if family in _KERNEL_LOADERS:
        return _KERNEL_LOADERS[family](d)
    raise KernelError(f"unknown kernel family {family!r}")


def random_stochastic_matrix(m, rng, floor=0.1):
    """Dirichlet(1) rows mixed with the uniform row at weight ``floor``."""
    rows = rng.dirichlet(np.ones(m), size=m)
    return (1.0 - floor) * rows + floor / m


# ---------------------------------------------------------------------------
# distances and stationarity


def _check_distribution(u, name):
    u = np.asarray(u, dtype=float).ravel()
    if np.any(u < -1e-12) or not np.all(np.isfinite(u)):
        raise DistributionError(f"{name} has invalid entry {u.min()!r}")
    s = u.sum()
    if abs(s - 1.0) > 1e-9:
        raise DistributionError(f"{name} sums to {s!r}, not 1")
    return u


def tv_distance(u1, u2):
    """Total-variation distance, half the L1 distance on a finite space."""
    u1 = _check_distribution(u1, "u1")
    u2 = _check_distribution(u2, "u2")
    if u1.shape != u2.shape:
        raise DistributionError(f"shape mismatch {u1.shape} vs {u2.shape}")
    return float(min(1.0, 0.5 * np.abs(u1 - u2).sum()))


def max_row_tv(P, Q):
    return float(0.5 * np.abs(np.asarray(P) - np.asarray(Q)).sum(axis=1).max())


def dobrushin(P):
    """Dobrushin contraction coefficient ``max_{x,y} TV(P[x], P[y])``."""
    P = np.asarray(P, dtype=float)
    return float(0.5 * np.abs(P[:, None, :] - P[None, :, :]).sum(axis=2).max())


def stationary_distribution(kernel, theta=None, tol=1e-10):
    """Unique stationary distribution of ``kernel`` at ``theta``.

    Raises :class:`ErgodicityError` if eigenvalue 1 is not simple (more than
    one closed class) or the solved vector misses the residual tolerance.
    """
    P = kernel.matrix(theta)
    m = P.shape[0]
    if m == 1:
        return np.ones(1)
    eig = np.linalg.eigvals(P)
    n_unit = int(np.sum(np.abs(eig - 1.0) < 1e-8))
    if n_unit != 1:
        raise ErgodicityError(
            f"eigenvalue 1 has multiplicity {n_unit}; stationary distribution is not unique")
    M = P.T - np.eye(m)
    M[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    try:
        mu = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise ErgodicityError(f"stationary system is singular: {exc}") from exc
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    for _ in range(50):
        residual = float(np.abs(mu @ P - mu).sum())
        if residual <= tol:
            return mu
        mu = mu @ P
        mu /= mu.sum()
    residual = float(np.abs(mu @ P - mu).sum())
    if residual > tol:
        raise ErgodicityError(f"stationary residual {residual:.3g} above {tol:g}", residual)
    return mu


def tv_curve(kernel, theta=None, horizon=200):
    """``sup_x TV(P^t[x], mu)`` for ``t = 0..horizon``.

    Powers the deviation matrix ``P - 1 mu`` (whose t-th power equals
    ``P^t - 1 mu`` for t >= 1) so tiny distances keep relative precision.
    """
    P = kernel.matrix(theta)
    mu = kernel.stationary(theta)
    Pi = np.broadcast_to(mu, P.shape)
    dev = P - Pi
    cur = np.eye(P.shape[0]) - Pi
    out = np.empty(horizon + 1)
    for t in range(horizon + 1):
        out[t] = min(1.0, 0.5 * np.abs(cur).sum(axis=1).max())
        cur = dev if t == 0 else cur @ dev
    return out


def mixing_time(kernel, theta=None, a=0.25, cap=10**6):
    """Smallest t whose worst-start TV distance to stationarity is <= ``a``."""
    if not 0.0 < a < 1.0:
        raise ValueError(f"mixing level must lie in (0, 1), got {a}")
    P = kernel.matrix(theta)
    mu = kernel.stationary(theta)
    Pi = np.broadcast_to(mu, P.shape)
    dev = P - Pi
    cur = np.eye(P.shape[0]) - Pi
    tv = 1.0
    for t in range(cap + 1):
        tv = 0.5 * np.abs(cur).sum(axis=1).max()
        if tv <= a:
            return t
        cur = dev if t == 0 else cur @ dev
    raise MixingTimeError(f"TV still {tv:.3g} > {a:g} after {cap} steps", last_tv=float(tv))


@dataclass(frozen=True)
class ErgodicityCertificate:
    m_const: float
    rho: float
    c_mixing: float
    horizon: int = 200
    tv: tuple = field(default=(), repr=False, compare=False)

    def bound(self, t):
        return self.m_const * self.rho ** np.asarray(t, dtype=float)

    def tau(self, a):
        """Certified mixing-time bound ``ceil(C log(m / a))``."""
        return int(math.ceil(self.c_mixing * math.log(self.m_const / a)))


def fit_ergodicity(kernel, theta=None, horizon=200):
    """Fit ``(m, rho, C)`` so that ``m rho^t`` dominates the measured TV curve."""
    P = kernel.matrix(theta)
    if P.shape[0] == 1:
        lam2 = 0.0
    else:
        moduli = np.sort(np.abs(np.linalg.eigvals(P)))[::-1]
        lam2 = float(moduli[1])
    rho = lam2 + EIGEN_MARGIN
    if rho >= 1.0:
        raise NonGeometricError(f"second eigenvalue modulus {lam2:.6g} leaves no geometric rate")
    curve = tv_curve(kernel, theta, horizon)
    t = np.arange(horizon + 1)
    pos = curve > 0
    log_m = np.max(np.log(curve[pos]) - t[pos] * math.log(rho)) if pos.any() else 0.0
    m_const = max(1.0, math.exp(log_m))
    c = 1.0 / math.log(1.0 / rho)
    for k in range(1, 21):
        a = 2.0 ** -k
        tau = mixing_time(kernel, theta, a)
        c = max(c, tau / math.log(m_const / a))
    return ErgodicityCertificate(m_const=m_const, rho=rho, c_mixing=c, horizon=horizon,
                                 tv=tuple(curve))


@dataclass
class KernelLipschitzReport:
    pairs: list
    worst_margin: float
    L_claim: float

    @property
    def passed(self):
        return all(p["pass"] for p in self.pairs)


def validate_kernel_lipschitz(kernel, theta_pairs, L_claim):
    """Check both kernel regularity inequalities on each ``(theta, theta')`` pair.

    The one-step inequality is checked over all ordered pairs of point masses
    and the uniform distribution. The pairs ``d = d' = delta_x`` reduce it to
    the row bound ``TV(P[x], P'[x]) <= L |dtheta|``, which is already
    sufficient for arbitrary ``d, d'``.
    """
    if len(theta_pairs) < 1:
        raise ValueError("need at least one theta pair")
    rows = []
    worst = math.inf
    for th, th2 in theta_pairs:
        th, th2 = _flat_theta(th), _flat_theta(th2)
        dist = float(np.linalg.norm(th - th2))
        slack = L_claim * dist
        P1, P2 = kernel.matrix(th), kernel.matrix(th2)
        m = P1.shape[0]
        mu_margin = slack - 0.5 * float(np.abs(kernel.stationary(th) - kernel.stationary(th2)).sum())
        D1 = np.vstack([P1, P1.mean(axis=0)])
        D2 = np.vstack([P2, P2.mean(axis=0)])
        lhs = 0.5 * np.abs(D1[:, None, :] - D2[None, :, :]).sum(axis=2)
        base = np.ones((m + 1, m + 1))
        np.fill_diagonal(base, 0.0)
        base[m, :m] = base[:m, m] = 1.0 - 1.0 / m
        step_margin = float(np.min(base + slack - lhs))
        margin = min(mu_margin, step_margin)
        worst = min(worst, margin)
        rows.append({
            "distance": dist,
            "stationary_margin": mu_margin,
            "transition_margin": step_margin,
            "pass": margin >= -1e-12,
        })
    return KernelLipschitzReport(pairs=rows, worst_margin=worst, L_claim=float(L_claim))


def draw_next(kernel, theta, state, rng):
    """One Markov transition ``X' ~ P_theta(X)`` by inverse CDF."""
    if not 0 <= state < kernel.m:
        raise StateRangeError(f"state {state} outside [0, {kernel.m})")
    th = _flat_theta(theta)
    if th is None:
        th = np.zeros(0)
    u = rng.random((1, kernel.uniforms_per_step))
    if kernel.uniforms_per_step == 1:
        row = kernel.rows(th[None, :], np.array([state]))[0]
        if np.any(row < 0) or abs(row.sum() - 1.0) > ROW_SUM_TOL:
            raise KernelError(f"row {state} is not a probability vector")
    return int(kernel.draw_batch(th[None, :], np.array([state]), u)[0])
