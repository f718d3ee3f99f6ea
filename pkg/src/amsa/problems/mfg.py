"""Tabular mean-field-game actor-critic as a three-level operator system.

Levels, slowest first:

1. ``theta`` in R^{S x A}: softmax policy logits,
2. ``u`` in the simplex over S: mean-field estimate,
3. ``(V, J)`` in R^{S + 1}: differential value function and average reward.

A sample is a transition ``X = (s, a, s')`` encoded as ``(s * A + a) * S + s'``.
The chain on X moves by ``a' ~ pi(.|s')`` and ``s'' ~ P(.|s', a', u)``, so the
operators are deterministic functions of ``(theta, X)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import OperatorSystem, register_system
from ..errors import DegeneracyError, KernelError
from ..samplers import MAX_DENSE_STATES, register_kernel

VALUE_ANCHOR = 1.0


@dataclass(frozen=True)
class MfgSpec:
    S: int
    A: int
    P: np.ndarray
    r: np.ndarray
    seed: int = 0
    floor: float = 0.05
    kernel_u_weight: float = 0.0

    def to_dict(self):
        return {"S": self.S, "A": self.A, "P_shape": [self.S, self.A, self.S],
                "P": self.P.tolist(), "r_shape": [self.S, self.A], "r": self.r.tolist(),
                "seed": self.seed, "floor": self.floor, "kernel_u_weight": self.kernel_u_weight}

    @classmethod
    def from_dict(cls, d):
        P = np.asarray(d["P"], dtype=float).reshape(d["S"], d["A"], d["S"])
        r = np.asarray(d["r"], dtype=float).reshape(d["S"], d["A"])
        return cls(int(d["S"]), int(d["A"]), P, r, int(d.get("seed", 0)),
                   float(d.get("floor", 0.05)), float(d.get("kernel_u_weight", 0.0)))


def make_random_mfg(S=30, A=10, seed=0, ergodicity_floor=0.05, kernel_u_weight=0.0):
    """Random MFG: Dirichlet(1) transition rows mixed with uniform, rewards U[0, 1]."""
    if S < 1 or A < 1:
        raise ValueError("S and A must be positive")
    if not 0 <= ergodicity_floor <= 1:
        raise ValueError(f"floor must lie in [0, 1], got {ergodicity_floor}")
    if not 0 <= kernel_u_weight < 1:
        raise ValueError("kernel_u_weight must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.ones(S), size=(S, A))
    P = (1.0 - ergodicity_floor) * rows + ergodicity_floor / S
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(S, A))
    return MfgSpec(S, A, P, r, seed, ergodicity_floor, kernel_u_weight)


def softmax_policy(theta):
    """Row-wise softmax of an ``(..., S, A)`` logit array."""
    z = np.asarray(theta, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def project_simplex(v):
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    srt = -np.sort(-v, axis=1)
    css = np.cumsum(srt, axis=1) - 1.0
    k = np.arange(1, n + 1)
    rho = np.count_nonzero(srt - css / k > 0, axis=1)
    tau = css[np.arange(v.shape[0]), rho - 1] / rho
    return np.maximum(v - tau[:, None], 0.0)


def transition_tensor(spec, u):
    """``P(s' | s, a, u)``; linear in u when ``kernel_u_weight > 0``."""
    eta = spec.kernel_u_weight
    if eta == 0:
        return spec.P
    return (1.0 - eta) * spec.P + eta * np.asarray(u)[None, None, :]


def state_stationary(P_pi):
    S = P_pi.shape[0]
    M = P_pi.T - np.eye(S)
    M[-1, :] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    try:
        v = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"state chain has no unique stationary distribution: {exc}") from exc
    return v


def _policy_chain(spec, theta_sa, u):
    pi = softmax_policy(theta_sa.reshape(spec.S, spec.A))
    P_sa = transition_tensor(spec, u)
    P_pi = np.einsum("sa,sat->st", pi, P_sa)
    return pi, P_sa, P_pi


def mfg_metrics(theta, u, spec):
    """Exact ``(||grad_theta J(pi_theta, u)||, ||u - v^{pi_theta, u}||)``."""
    theta = np.asarray(theta, dtype=float)
    u = np.asarray(u, dtype=float)
    pi, P_sa, P_pi = _policy_chain(spec, theta, u)
    v = state_stationary(P_pi)
    r_pi = (pi * spec.r).sum(axis=1)
    J = float(v @ r_pi)
    M = np.eye(spec.S) - P_pi + np.outer(np.ones(spec.S), v)
    try:
        V = np.linalg.solve(M, r_pi - J)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"differential value system is singular: {exc}") from exc
    Q = spec.r - J + P_sa @ V
    adv = Q - (pi * Q).sum(axis=1, keepdims=True)
    grad = v[:, None] * pi * adv
    return float(np.linalg.norm(grad)), float(np.linalg.norm(u - v))


def exact_lower_targets(spec, theta, u=None):
    """Oracle targets ``(u, V, J)`` for a fixed policy.

    Without a u-dependent kernel, ``u`` is the policy's state occupancy; with
    one it is found by fixed-point iteration on the occupancy map.
    """
    theta = np.asarray(theta, dtype=float)
    u = np.full(spec.S, 1.0 / spec.S) if u is None else np.asarray(u, dtype=float)
    for _ in range(10_000):
        _, _, P_pi = _policy_chain(spec, theta, u)
        v = state_stationary(P_pi)
        if spec.kernel_u_weight == 0 or np.abs(v - u).max() < 1e-15:
            u = v
            break
        u = v
    pi, _, P_pi = _policy_chain(spec, theta, u)
    r_pi = (pi * spec.r).sum(axis=1)
    J = float(u @ r_pi)
    M = np.eye(spec.S) - P_pi + np.outer(np.ones(spec.S), np.full(spec.S, 1.0 / spec.S))
    V = np.linalg.solve(M, r_pi - J)
    return u, V, J


class MfgKernel:
    """Transition chain on ``X = (s, a, s')`` induced by the policy and mean field."""

    family = "mfg"
    uniforms_per_step = 2
    is_fixed = False

    def __init__(self, spec):
        self.spec = spec
        self.m = spec.S * spec.A * spec.S

    def _parts(self, theta):
        S, A = self.spec.S, self.spec.A
        theta = np.zeros(S * A + 2 * S + 1) if theta is None else np.asarray(theta, dtype=float)
        return theta[..., :S * A], theta[..., S * A:S * A + S]

    def draw_batch(self, theta_batch, states, uniforms):
        S, A = self.spec.S, self.spec.A
        B = states.shape[0]
        idx = np.arange(B)
        s = states % S
        logits = theta_batch[:, :S * A].reshape(B, S, A)[idx, s]
        pi = softmax_policy(logits)
        a = np.minimum(np.count_nonzero(np.cumsum(pi, axis=1) <= uniforms[:, :1], axis=1), A - 1)
        row = self.spec.P[s, a]
        eta = self.spec.kernel_u_weight
        if eta:
            row = (1.0 - eta) * row + eta * theta_batch[:, S * A:S * A + S]
        s2 = np.minimum(np.count_nonzero(np.cumsum(row, axis=1) <= uniforms[:, 1:2], axis=1), S - 1)
        return (s * A + a) * S + s2

    def rows(self, theta_batch, states):
        return np.stack([self.matrix(th)[x] for th, x in zip(theta_batch, states)])

    def matrix(self, theta=None):
        if self.m > MAX_DENSE_STATES:
            raise KernelError(f"dense matrix of {self.m} states exceeds the {MAX_DENSE_STATES} cap")
        S, A = self.spec.S, self.spec.A
        th, u = self._parts(theta)
        pi, P_sa, _ = _policy_chain(self.spec, th, u)
        nxt = (pi[:, :, None] * P_sa).reshape(S, A * S)
        Pm = np.zeros((self.m, self.m))
        for x in range(self.m):
            s2 = x % S
            Pm[x, s2 * A * S:(s2 + 1) * A * S] = nxt[s2]
        return Pm

    def stationary(self, theta=None):
        th, u = self._parts(theta)
        pi, P_sa, P_pi = _policy_chain(self.spec, th, u)
        v = state_stationary(P_pi)
        return (v[:, None, None] * pi[:, :, None] * P_sa).ravel()

    def stationary_batch(self, theta_batch):
        return np.stack([self.stationary(th) for th in theta_batch])

    def to_dict(self):
        return {"m": self.m, "family": "mfg", "spec": self.spec.to_dict()}


register_kernel("mfg", lambda d: MfgKernel(MfgSpec.from_dict(d["spec"])))


class MfgSystem(OperatorSystem):
    kind = "mfg"

    def __init__(self, spec, kappa=VALUE_ANCHOR, metadata=None):
        S, A = spec.S, spec.A
        super().__init__([S * A, S, S + 1], MfgKernel(spec), metadata, mean_consistent=False)
        self.spec = spec
        self.kappa = float(kappa)

    def _unpack(self, theta):
        S, A = self.spec.S, self.spec.A
        o2, o3 = S * A, S * A + S
        return theta[..., :o2], theta[..., o2:o3], theta[..., o3:o3 + S], theta[..., -1]

    def evaluate_flat(self, theta, states):
        S, A = self.spec.S, self.spec.A
        B = theta.shape[0]
        idx = np.arange(B)
        s, a, s2 = states // (A * S), (states // S) % A, states % S
        th, u, V, J = self._unpack(theta)
        pi = softmax_policy(th.reshape(B, S, A)[idx, s])
        r = self.spec.r[s, a]
        td = r - J + V[idx, s2] - V[idx, s]
        out = np.zeros((B, self.D))
        score = -pi
        score[idx, a] += 1.0
        g1 = out[:, :S * A].reshape(B, S, A)
        g1[idx, s] = -td[:, None] * score
        o2 = S * A
        out[:, o2:o2 + S] = u
        out[idx, o2 + s] -= 1.0
        o3 = o2 + S
        out[:, o3:o3 + S] = self.kappa * V.mean(axis=1)[:, None]
        out[idx, o3 + s] -= td
        out[:, -1] = J - r
        return out

    def mean_operator_flat(self, theta):
        S, A = self.spec.S, self.spec.A
        th, u, V, J = self._unpack(np.asarray(theta, dtype=float))
        pi, P_sa, P_pi = _policy_chain(self.spec, th, u)
        v = state_stationary(P_pi)
        q = self.spec.r - J + P_sa @ V - V[:, None]
        g1 = -v[:, None] * pi * (q - (pi * q).sum(axis=1, keepdims=True))
        f3 = -v * (pi * q).sum(axis=1) + self.kappa * V.mean()
        fJ = J - v @ (pi * self.spec.r).sum(axis=1)
        return np.concatenate([g1.ravel(), u - v, f3, [fJ]])

    def project(self, theta):
        o2 = self.spec.S * self.spec.A
        theta[:, o2:o2 + self.spec.S] = project_simplex(theta[:, o2:o2 + self.spec.S])
        return theta

    def initial_point(self):
        S, A = self.spec.S, self.spec.A
        return np.concatenate([np.zeros(S * A), np.full(S, 1.0 / S), np.zeros(S + 1)])

    def extra_metrics(self, theta):
        th, u, _, _ = self._unpack(np.asarray(theta, dtype=float))
        g, gap = mfg_metrics(th, u, self.spec)
        return {"grad_norm": g, "meanfield_gap": gap}

    def to_dict(self):
        return {"n_levels": 3, "dims": self.dims, "sample_space_size": self.sample_space_size,
                "kind": "mfg", "spec": self.spec.to_dict(), "kappa": self.kappa,
                "metadata": {k: v for k, v in self.metadata.items() if not isinstance(v, np.ndarray)}}


def mfg_operator_system(spec, kappa=VALUE_ANCHOR):
    return MfgSystem(spec, kappa, {"generator": "mfg", "seed": spec.seed})


register_system("mfg", lambda d, meta: MfgSystem(MfgSpec.from_dict(d["spec"]), d.get("kappa", VALUE_ANCHOR), meta))
