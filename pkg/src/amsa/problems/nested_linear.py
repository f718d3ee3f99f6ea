"""Nested strongly monotone affine benchmarks with Markovian noise.

``F(theta, X) = A theta + b + g(X)`` where each diagonal block ``A_ii`` is
symmetric positive definite with spectrum in ``[delta, 2 delta]``, the
off-diagonal blocks have spectral norm ``coupling_scale`` and the noise
table ``g`` has exact zero mean under the kernel's stationary distribution.
"""

from __future__ import annotations

import numpy as np

from ..core import AffineSystem
from ..diagnostics import _fixed_point, estimate_nested_delta, exact_affine_constants
from ..errors import GenerationError
from ..samplers import FixedKernel, MixtureKernel, random_stochastic_matrix

MAX_ATTEMPTS = 20


def _spd_block(d, delta, rng):
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    eigs = rng.uniform(delta, 2 * delta, size=d)
    eigs[0] = delta
    M = Q.T @ np.diag(eigs) @ Q
    return 0.5 * (M + M.T)


def _coupling_block(rows, cols, scale, rng):
    if scale == 0:
        return np.zeros((rows, cols))
    M = rng.normal(size=(rows, cols))
    return M * (scale / np.linalg.norm(M, 2))


def _build(N, dims, delta_target, coupling_scale, sigma, kernel_kind, m, epsilon, rng):
    D = sum(dims)
    off = np.concatenate([[0], np.cumsum(dims)])
    A = np.zeros((D, D))
    for i in range(N):
        for j in range(N):
            si, sj = slice(off[i], off[i + 1]), slice(off[j], off[j + 1])
            A[si, sj] = (_spd_block(dims[i], delta_target, rng) if i == j
                         else _coupling_block(dims[i], dims[j], coupling_scale, rng))
    b = rng.uniform(-1.0, 1.0, size=D)
    if kernel_kind == "fixed":
        kernel = FixedKernel(random_stochastic_matrix(m, rng))
        mu = kernel.stationary()
    elif kernel_kind == "theta-mixture":
        P_a = random_stochastic_matrix(m, rng)
        P_b = random_stochastic_matrix(m, rng)
        w = rng.normal(size=D)
        w /= np.linalg.norm(w)
        kernel = MixtureKernel(P_a, P_b, epsilon, w, 0.5)
        mu = FixedKernel(P_a).stationary()
    else:
        raise ValueError(f"unknown kernel kind {kernel_kind!r}")
    raw = rng.normal(size=(m, D))
    G = sigma * (raw - mu @ raw)
    return A, b, G, kernel


def make_nested_linear(N=2, dims=None, delta_target=0.5, coupling_scale=0.1, sigma=0.5,
                       kernel_kind="fixed", seed=0, m=5, epsilon=0.1):
    """Generate a validated nested-linear system.

    Builds are retried with seeds ``seed, seed + 1, ...`` until the nested
    strong-monotonicity modulus is at least ``delta_target / 2``.
    """
    dims = [int(d) for d in (dims if dims is not None else [2] * N)]
    if len(dims) != N or min(dims) < 1:
        raise ValueError(f"dims {dims} do not describe {N} positive levels")
    if not 0 < delta_target <= 1:
        raise ValueError(f"delta_target must lie in (0, 1], got {delta_target}")
    if coupling_scale < 0 or sigma < 0:
        raise ValueError("coupling_scale and sigma must be non-negative")
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(seed + attempt)
        A, b, G, kernel = _build(N, dims, delta_target, coupling_scale, sigma, kernel_kind, m,
                                 epsilon, rng)
        meta = {"delta_target": delta_target, "coupling_scale": coupling_scale,
                "noise_scale": sigma, "seed": seed, "attempt": attempt,
                "generator": "nested_linear"}
        if kernel_kind == "fixed":
            system = AffineSystem(A, b, G, dims, kernel, meta, mean_consistent=True)
            delta = estimate_nested_delta(system)
            if delta < delta_target / 2:
                continue
            system.metadata["solution"] = np.linalg.solve(A, -system.affine_structure()[1])
            system.metadata["delta"] = delta
            system.metadata.update(exact_affine_constants(system))
            return system
        noiseless = AffineSystem(A, b, np.zeros_like(G), dims, FixedKernel(kernel.P_a))
        delta = estimate_nested_delta(noiseless)
        if delta < delta_target / 2:
            continue
        consts = exact_affine_constants(_with_solution(noiseless, A, b))
        meta.update(delta=delta, lipschitz=consts["lipschitz"],
                    kernel_lipschitz=kernel.lipschitz_constant())
        system = AffineSystem(A, b, G, dims, kernel, meta, mean_consistent=True)
        y, _ = _fixed_point(system, np.zeros(0), 1, 1e-12, y0=np.linalg.solve(A, -b))
        system.metadata["solution"] = y
        system.metadata["target_bound"] = consts["target_bound"]
        return system
    raise GenerationError(
        f"no system with nested delta >= {delta_target / 2} after {MAX_ATTEMPTS} attempts; "
        "try a smaller coupling_scale")


def _with_solution(system, A, b):
    system.metadata["solution"] = np.linalg.solve(A, -b)
    return system


def decoupled_system(blocks, offsets_b, sigma=0.0, m=2, P=None):
    """Block-diagonal affine system from explicit ``A_ii`` and ``b_i`` (test fixture helper)."""
    dims = [np.atleast_2d(B).shape[0] for B in blocks]
    D = sum(dims)
    A = np.zeros((D, D))
    off = np.concatenate([[0], np.cumsum(dims)])
    for i, B in enumerate(blocks):
        A[off[i]:off[i + 1], off[i]:off[i + 1]] = B
    b = np.concatenate([np.ravel(x) for x in offsets_b])
    kernel = FixedKernel(P if P is not None else np.full((m, m), 1.0 / m))
    G = np.zeros((kernel.m, D))
    if sigma:
        G[:, 0] = sigma * np.where(np.arange(kernel.m) % 2 == 0, 1.0, -1.0)
    system = AffineSystem(A, b, G, dims, kernel, {"noise_scale": sigma})
    return system
