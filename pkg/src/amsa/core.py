"""Coupled operator systems, parameter stacks and exact operator evaluation.

A system of N levels has decision blocks ``theta_i`` of length ``d_i``.
Internally every system works on the flat concatenation of the blocks,
batched over independent trajectories: ``evaluate_flat(theta, states)``
maps a ``(B, D)`` array and ``B`` sample indices to ``(B, D)`` operator
values. Level-wise views are slices of that flat layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError, StateRangeError
from .samplers import FixedKernel, kernel_from_dict


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


class ParameterStack:
    """Ordered blocks ``(theta_1, ..., theta_N)`` of float64 vectors."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        blocks = [np.array(b, dtype=float).ravel() for b in blocks]
        if len(blocks) < 1:
            raise DimensionError("a parameter stack needs at least one level")
        for i, b in enumerate(blocks, 1):
            if b.size < 1:
                raise DimensionError("empty block", level=i, expected=">=1", actual=0)
            _check_finite(b, f"block {i}")
        self.blocks = blocks

    @classmethod
    def zeros(cls, dims):
        return cls([np.zeros(d) for d in dims])

    @classmethod
    def from_flat(cls, flat, dims):
        flat = np.asarray(flat, dtype=float).ravel()
        if flat.size != sum(dims):
            raise DimensionError(f"flat vector has {flat.size} entries, dims sum to {sum(dims)}")
        return cls(np.split(flat, np.cumsum(dims)[:-1]))

    @property
    def dims(self):
        return [b.size for b in self.blocks]

    @property
    def n_levels(self):
        return len(self.blocks)

    @property
    def flat(self):
        return np.concatenate(self.blocks)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    def _check_like(self, other):
        if other.dims != self.dims:
            for i, (a, b) in enumerate(zip(self.dims, other.dims), 1):
                if a != b:
                    raise DimensionError("stack mismatch", level=i, expected=a, actual=b)
            raise DimensionError(f"stack has {other.n_levels} levels, expected {self.n_levels}")

    def __add__(self, other):
        self._check_like(other)
        return ParameterStack([a + b for a, b in zip(self.blocks, other.blocks)])

    def __sub__(self, other):
        self._check_like(other)
        return ParameterStack([a - b for a, b in zip(self.blocks, other.blocks)])

    def __mul__(self, scalar):
        return ParameterStack([scalar * b for b in self.blocks])

    __rmul__ = __mul__

    def __eq__(self, other):
        return (isinstance(other, ParameterStack) and self.dims == other.dims
                and all(np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks)))

    def __repr__(self):
        return f"ParameterStack(dims={self.dims})"

    def copy(self):
        return ParameterStack([b.copy() for b in self.blocks])

    def tolist(self):
        return [b.tolist() for b in self.blocks]


@dataclass(frozen=True)
class LevelVector:
    level: int
    values: np.ndarray

    def __post_init__(self):
        if self.level < 1:
            raise DimensionError(f"levels are 1-based, got {self.level}")


def stack_norms(theta):
    """Euclidean norm of each block."""
    return [float(np.linalg.norm(b)) for b in as_stack(theta)]


def stack_axpy(a, x, y):
    """Blockwise ``y + a * x``."""
    x, y = as_stack(x), as_stack(y)
    return y + a * x


def as_stack(theta, dims=None):
    if isinstance(theta, ParameterStack):
        stack = theta
    elif dims is not None and isinstance(theta, np.ndarray) and theta.ndim == 1:
        stack = ParameterStack.from_flat(theta, dims)
    else:
        stack = ParameterStack(theta)
    if dims is not None and stack.dims != list(dims):
        for i, (a, b) in enumerate(zip(dims, stack.dims), 1):
            if a != b:
                raise DimensionError("theta does not match the system", level=i, expected=a, actual=b)
        raise DimensionError(f"theta has {stack.n_levels} levels, system has {len(dims)}")
    return stack


def rowwise_matmul(X, A):
    """``X @ A.T`` with a fixed per-row summation order.

    Each output row depends only on the matching input row, so results are
    bitwise independent of batch size and of how trajectories are chunked.
    """
    out = np.zeros((X.shape[0], A.shape[0]))
    for j in range(A.shape[1]):
        out += X[:, j:j + 1] * A[:, j]
    return out


class OperatorSystem:
    """N coupled stochastic operators ``F_i(theta, X)`` over a finite sample space.

    Subclasses implement :meth:`evaluate_flat`. ``metadata`` may carry the
    known constants ``delta``, ``lipschitz``, ``target_bound``, ``solution``
    (flat array) and ``noise_scale``.
    """

    kind = "custom"

    def __init__(self, dims, kernel, metadata=None, mean_consistent=False):
        dims = [int(d) for d in dims]
        if not dims or min(dims) < 1:
            raise DimensionError(f"dims must be positive, got {dims}")
        self.dims = dims
        self.n_levels = len(dims)
        self.D = sum(dims)
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.kernel = kernel
        self.metadata = dict(metadata or {})
        self.mean_consistent = bool(mean_consistent)

    @property
    def sample_space_size(self):
        return self.kernel.m

    def level_slice(self, level):
        """Slice of the flat layout for 1-based ``level``."""
        return slice(self.offsets[level - 1], self.offsets[level])

    def split(self, flat):
        return [flat[..., self.level_slice(i)] for i in range(1, self.n_levels + 1)]

    @property
    def solution(self):
        sol = self.metadata.get("solution")
        return None if sol is None else np.asarray(sol, dtype=float)

    def evaluate_flat(self, theta, states):
        raise NotImplementedError

    def mean_operator_flat(self, theta):
        """Exact ``sum_X mu_theta(X) F(theta, X)`` for a single flat theta."""
        theta = np.asarray(theta, dtype=float)
        mu = self.kernel.stationary(theta)
        m = mu.size
        vals = self.evaluate_flat(np.broadcast_to(theta, (m, self.D)).copy(), np.arange(m))
        return mu @ vals

    def project(self, theta):
        """In-place feasibility projection of a ``(B, D)`` batch; identity by default."""
        return theta

    def affine_structure(self):
        """``(A, c)`` with ``F_bar(theta) = A theta + c`` when that holds globally, else None."""
        return None

    def initial_point(self):
        return np.zeros(self.D)

    def extra_metrics(self, theta):
        """Problem-specific scalars recorded alongside residuals."""
        return {}

    def to_dict(self):
        raise NotImplementedError(f"{type(self).__name__} is not serialisable")


class AffineSystem(OperatorSystem):
    """``F(theta, X) = A theta + b + G[X]`` with ``A`` the full block matrix."""

    kind = "affine"

    def __init__(self, A, b, G, dims, kernel, metadata=None, mean_consistent=False):
        super().__init__(dims, kernel, metadata, mean_consistent)
        A = np.array(A, dtype=float)
        b = np.array(b, dtype=float).ravel()
        G = np.array(G, dtype=float).reshape(kernel.m, -1) if np.size(G) else np.zeros((kernel.m, self.D))
        if A.shape != (self.D, self.D) or b.size != self.D or G.shape != (kernel.m, self.D):
            raise DimensionError(
                f"affine payload shapes A{A.shape} b{b.shape} G{G.shape} do not match D={self.D}, m={kernel.m}")
        for arr, name in ((A, "A"), (b, "b"), (G, "G")):
            _check_finite(arr, name)
            arr.setflags(write=False)
        self.A, self.b, self.G = A, b, G

    def block(self, i, j):
        return self.A[self.level_slice(i), self.level_slice(j)]

    def evaluate_flat(self, theta, states):
        return rowwise_matmul(theta, self.A) + self.b + self.G[states]

    def mean_operator_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        mu = self.kernel.stationary(theta)
        return rowwise_matmul(theta[None, :], self.A)[0] + self.b + mu @ self.G

    def affine_structure(self):
        if not self.kernel.is_fixed:
            return None
        return self.A, self.b + self.kernel.stationary() @ self.G

    def to_dict(self):
        return {
            "n_levels": self.n_levels,
            "dims": self.dims,
            "sample_space_size": self.sample_space_size,
            "kind": "affine",
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "G": self.G.tolist(),
            "mean_consistent": self.mean_consistent,
            "kernel": self.kernel.to_dict(),
            "metadata": _metadata_to_json(self.metadata),
        }


class FunctionSystem(OperatorSystem):
    """System from a batched callable ``fn(theta (B, D), states (B,)) -> (B, D)``."""

    def __init__(self, dims, kernel, fn, metadata=None, mean_consistent=False, affine=None):
        super().__init__(dims, kernel, metadata, mean_consistent)
        self._fn = fn
        self._affine = affine

    def evaluate_flat(self, theta, states):
        out = np.asarray(self._fn(theta, states), dtype=float)
        if out.shape != theta.shape:
            raise DimensionError(f"operator returned shape {out.shape}, expected {theta.shape}")
        return out

    def affine_structure(self):
        return self._affine


def zero_system(dims, m=1):
    """The identically-zero operator on a uniform i.i.d. sample space."""
    D = sum(dims)
    kernel = FixedKernel(np.full((m, m), 1.0 / m))
    return AffineSystem(np.zeros((D, D)), np.zeros(D), np.zeros((m, D)), dims, kernel,
                        metadata={"solution": np.zeros(D), "lipschitz": 1.0},
                        mean_consistent=True)


def _validate_call(system, level, theta, state=None):
    if not 1 <= level <= system.n_levels:
        raise DimensionError(f"level {level} outside 1..{system.n_levels}")
    stack = as_stack(theta, system.dims)
    if state is not None and not 0 <= int(state) < system.sample_space_size:
        raise StateRangeError(f"state {state} outside [0, {system.sample_space_size})")
    return stack.flat


def evaluate_operator(system, level, theta, state):
    """``F_level(theta, state)`` as a :class:`LevelVector` (1-based level)."""
    flat = _validate_call(system, level, theta, state)
    out = system.evaluate_flat(flat[None, :], np.array([int(state)]))[0]
    _check_finite(out, f"F_{level}")
    return LevelVector(level, out[system.level_slice(level)].copy())


def evaluate_mean_operator(system, level, theta):
    """Exact stationary expectation ``F_bar_level(theta)``."""
    flat = _validate_call(system, level, theta)
    out = system.mean_operator_flat(flat)
    _check_finite(out, f"F_bar_{level}")
    return LevelVector(level, out[system.level_slice(level)].copy())


def check_affine_bound(system, theta, L):
    """Boolean ``(N, m)`` table of ``||F_i(theta, X)|| <= L (sum_j ||theta_j|| + 1)``."""
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    stack = as_stack(theta, system.dims)
    flat = stack.flat
    m = system.sample_space_size
    vals = system.evaluate_flat(np.broadcast_to(flat, (m, system.D)).copy(), np.arange(m))
    rhs = L * (sum(stack_norms(stack)) + 1.0)
    norms = np.stack([np.linalg.norm(v, axis=1) for v in system.split(vals)])
    return norms <= rhs


def _metadata_to_json(meta):
    out = {}
    for k, v in meta.items():
        out[k] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


_SYSTEM_LOADERS = {}


def register_system(kind, loader):
    _SYSTEM_LOADERS[kind] = loader


def system_from_dict(d):
    kind = d.get("kind")
    meta = dict(d.get("metadata", {}))
    if meta.get("solution") is not None:
        meta["solution"] = np.asarray(meta["solution"], dtype=float)
    if kind == "affine":
        kernel = kernel_from_dict(d["kernel"])
        sys_ = AffineSystem(d["A"], d["b"], d["G"], d["dims"], kernel, meta,
                            d.get("mean_consistent", False))
    elif kind in _SYSTEM_LOADERS:
        sys_ = _SYSTEM_LOADERS[kind](d, meta)
    else:
        raise ValueError(f"unknown system kind {kind!r}")
    if d.get("n_levels", sys_.n_levels) != sys_.n_levels:
        raise DimensionError("n_levels disagrees with dims")
    if d.get("sample_space_size", sys_.sample_space_size) != sys_.sample_space_size:
        raise DimensionError("sample_space_size disagrees with the kernel")
    return sys_


def save_system(system, path):
    with open(path, "w") as fh:
        json.dump(system.to_dict(), fh, indent=1)


def load_system(path):
    with open(path) as fh:
        return system_from_dict(json.load(fh))
