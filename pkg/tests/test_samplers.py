import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amsa.errors import ErgodicityError, KernelError, NonGeometricError, StateRangeError
from amsa.samplers import (FixedKernel, MixtureKernel, draw_next, fit_ergodicity, kernel_from_dict,
                           max_row_tv, mixing_time, random_stochastic_matrix,
                           stationary_distribution, tv_curve, tv_distance,
                           validate_kernel_lipschitz)


def two_state(p, q):
    return FixedKernel([[1 - p, p], [q, 1 - q]])


def brute_force_mixing_time(P, a, cap=10_000):
    """Independent oracle: iterate every point-mass start forward and compare to mu."""
    P = np.asarray(P, dtype=float)
    m = P.shape[0]
    w, v = np.linalg.eig(P.T)
    mu = np.real(v[:, np.argmin(np.abs(w - 1))])
    mu = mu / mu.sum()
    dists = np.eye(m)
    for t in range(cap):
        tv = max(0.5 * np.abs(d - mu).sum() for d in dists)
        if tv <= a:
            return t
        dists = dists @ P
    raise AssertionError("oracle did not mix")


def test_tv_distance_examples():
    u = np.array([0.2, 0.3, 0.5])
    assert tv_distance(u, u) == 0.0
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.4, abs=1e-15)


def test_tv_distance_rejects_non_distribution():
    with pytest.raises(Exception):
        tv_distance([0.5, 0.6], [0.5, 0.5])


def test_stationary_two_state_closed_form():
    mu = stationary_distribution(two_state(0.2, 0.3))
    np.testing.assert_allclose(mu, [0.6, 0.4], atol=1e-10)


def test_stationary_doubly_stochastic_is_uniform():
    P = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.4, 0.2, 0.4]])
    np.testing.assert_allclose(stationary_distribution(FixedKernel(P)), np.full(3, 1 / 3), atol=1e-12)


def test_identity_kernel_is_not_ergodic():
    with pytest.raises(ErgodicityError):
        stationary_distribution(FixedKernel(np.eye(3)))


def test_non_stochastic_rows_rejected():
    with pytest.raises(KernelError):
        FixedKernel([[0.5, 0.6], [0.5, 0.5]])


@pytest.mark.parametrize("p,q,a,expected", [(0.5, 0.5, 0.01, 1), (0.1, 0.1, 0.01, 18)])
def test_mixing_time_examples(p, q, a, expected):
    # 0.5 * 0.8^t <= 0.01 first holds at t = 18 for the slow chain
    assert mixing_time(two_state(p, q), a=a) == expected
    assert brute_force_mixing_time([[1 - p, p], [q, 1 - q]], a) == expected


def test_mixing_time_zero_when_already_mixed():
    P = np.full((4, 4), 0.25)
    assert mixing_time(FixedKernel(P), a=1 - 1 / 4) == 0


@pytest.mark.parametrize("a", [0.1, 0.01, 0.001])
def test_mixing_time_matches_power_iteration_oracle(a):
    P = [[0.8, 0.2], [0.3, 0.7]]
    assert mixing_time(FixedKernel(P), a=a) == brute_force_mixing_time(P, a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.sampled_from([0.2, 0.05, 0.005]))
def test_mixing_time_oracle_on_random_kernels(seed, m, a):
    P = random_stochastic_matrix(m, np.random.default_rng(seed))
    assert mixing_time(FixedKernel(P), a=a) == brute_force_mixing_time(P, a)


def test_certificate_two_state_rates():
    cert = fit_ergodicity(two_state(0.2, 0.3))
    assert cert.rho == pytest.approx(0.5, abs=1e-5)
    cert = fit_ergodicity(two_state(0.5, 0.5))
    assert cert.rho == pytest.approx(1e-6, abs=1e-9)
    curve = tv_curve(two_state(0.5, 0.5), horizon=10)
    assert np.all(curve[1:] <= 1e-15)


def test_certificate_dominates_tv_curve():
    k = two_state(0.2, 0.3)
    cert = fit_ergodicity(k, horizon=200)
    t = np.arange(201)
    assert np.all(cert.bound(t) >= tv_curve(k, horizon=200))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_certificate_dominates_random_kernels(seed, m):
    k = FixedKernel(random_stochastic_matrix(m, np.random.default_rng(seed)))
    cert = fit_ergodicity(k, horizon=100)
    assert np.all(cert.bound(np.arange(101)) >= tv_curve(k, horizon=100) * (1 - 1e-12))
    for a in (0.1, 0.01):
        assert cert.tau(a) >= mixing_time(k, a=a)


def test_identity_kernel_has_no_certificate():
    with pytest.raises(NonGeometricError):
        fit_ergodicity(FixedKernel(np.eye(2)))


def test_fixed_kernel_lipschitz_any_claim():
    k = FixedKernel(random_stochastic_matrix(4, np.random.default_rng(0)))
    pairs = [(np.ones(3), np.zeros(3)), (np.arange(3.0), -np.arange(3.0))]
    assert validate_kernel_lipschitz(k, pairs, 0.0).passed


def _mixture(eps, seed=1, d=3):
    rng = np.random.default_rng(seed)
    Pa, Pb = random_stochastic_matrix(4, rng), random_stochastic_matrix(4, rng)
    w = rng.normal(size=d)
    return MixtureKernel(Pa, Pb, eps, w / np.linalg.norm(w), 0.5)


def _pairs(n, d=3, seed=2):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=d), rng.normal(size=d)) for _ in range(n)]


def test_mixture_with_zero_epsilon_is_fixed():
    k = _mixture(0.0)
    assert validate_kernel_lipschitz(k, _pairs(10), 0.0).passed


def test_mixture_row_bound_with_row_constant():
    k = _mixture(0.1)
    claim = 0.1 * max_row_tv(k.P_a, k.P_b)
    rep = validate_kernel_lipschitz(k, _pairs(50), claim)
    assert all(r["transition_margin"] >= -1e-12 for r in rep.pairs)


def test_mixture_full_check_with_documented_constant():
    k = _mixture(0.1)
    rep = validate_kernel_lipschitz(k, _pairs(50), k.lipschitz_constant())
    assert rep.passed


def test_draw_next_permutation_and_point_mass():
    perm = np.eye(3)[[2, 0, 1]]
    k = FixedKernel(perm)
    rng = np.random.default_rng(0)
    assert [draw_next(k, None, s, rng) for s in range(3)] == [2, 0, 1]
    P = np.array([[1.0, 0, 0], [0.2, 0.3, 0.5], [1 / 3, 1 / 3, 1 / 3]])
    assert all(draw_next(FixedKernel(P), None, 0, rng) == 0 for _ in range(50))


def test_draw_next_reference_inverse_cdf_walk():
    k = FixedKernel(np.full((4, 4), 0.25))
    rng = np.random.default_rng(42)
    got = []
    s = 0
    for _ in range(200):
        s = draw_next(k, None, s, rng)
        got.append(s)
    ref_rng = np.random.default_rng(42)
    ref = []
    for _ in range(200):
        u = ref_rng.random()
        ref.append(min(int(u // 0.25), 3))
    assert got == ref


def test_draw_next_range_error():
    with pytest.raises(StateRangeError):
        draw_next(FixedKernel(np.eye(2) * 0.5 + 0.25), None, 5, np.random.default_rng(0))


def test_kernel_round_trip():
    k = _mixture(0.1)
    k2 = kernel_from_dict(k.to_dict())
    th = np.array([0.3, -0.2, 0.1])
    np.testing.assert_array_equal(k.matrix(th), k2.matrix(th))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_random_rows_stochastic_and_stationary(seed, m):
    P = random_stochastic_matrix(m, np.random.default_rng(seed))
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    mu = stationary_distribution(FixedKernel(P))
    assert np.abs(mu @ P - mu).sum() <= 1e-10
    assert mu.min() >= 0
