import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import toeplitz

from sparseiv.diagnostics import Mode, gram_matrix, restricted_eigenvalue_estimate, sparse_eigenvalues
from sparseiv.errors import TooLarge

from conftest import toeplitz_design, unit_ms


@pytest.mark.parametrize("m", [1, 2, 4])
def test_identity(m):
    d = sparse_eigenvalues(np.eye(4), m)
    assert d.phi_min == pytest.approx(1.0) and d.phi_max == pytest.approx(1.0) and d.exact


def test_two_by_two():
    d = sparse_eigenvalues(np.array([[1.0, 0.5], [0.5, 1.0]]), 2)
    assert d.phi_min == pytest.approx(0.5, abs=1e-14)
    assert d.phi_max == pytest.approx(1.5, abs=1e-14)


def test_greedy_bracket_contains_exact():
    M = toeplitz(0.5 ** np.arange(10))
    exact = sparse_eigenvalues(M, 3, Mode.EXACT)
    greedy = sparse_eigenvalues(M, 3, Mode.GREEDY)
    assert not greedy.exact
    lo, hi = greedy.phi_min_bounds
    assert lo - 1e-12 <= exact.phi_min <= hi + 1e-12
    lo, hi = greedy.phi_max_bounds
    assert lo - 1e-12 <= exact.phi_max <= hi + 1e-12


def test_enumeration_cap():
    with pytest.raises(TooLarge):
        sparse_eigenvalues(np.eye(100), 10, Mode.EXACT)


def test_monotone_in_m_and_unit_diagonal():
    F = unit_ms(toeplitz_design(60, 8, seed=2))
    M = gram_matrix(F)
    res = [sparse_eigenvalues(M, m) for m in range(1, 9)]
    assert res[0].phi_min == pytest.approx(1.0) and res[0].phi_max == pytest.approx(1.0)
    for a, b in zip(res, res[1:]):
        assert b.phi_min <= a.phi_min + 1e-12
        assert b.phi_max >= a.phi_max - 1e-12


def test_re_identity():
    d = restricted_eigenvalue_estimate(np.eye(5), [0], C=2.0)
    assert d.kappa_hat == pytest.approx(1.0, abs=1e-6)


def test_re_non_increasing_in_C():
    M = toeplitz(0.6 ** np.arange(6))
    vals = [restricted_eigenvalue_estimate(M, [0, 2], C).kappa_hat for C in (0.5, 1.0, 2.0, 4.0)]
    assert all(b <= a + 1e-7 for a, b in zip(vals, vals[1:]))


def _re_oracle(M, T, C):
    cp = pytest.importorskip("cvxpy")
    p, s = M.shape[0], len(T)
    Tc = [j for j in range(p) if j not in T]
    L = np.linalg.cholesky(M + 1e-12 * np.eye(p))
    best = np.inf
    for signs in itertools.product((1.0, -1.0), repeat=s - 1):
        sg = np.array((1.0,) + signs)
        d = cp.Variable(p)
        cons = [cp.multiply(sg, d[T]) >= 0, cp.sum(cp.multiply(sg, d[T])) == 1, cp.norm1(d[Tc]) <= C]
        prob = cp.Problem(cp.Minimize(cp.sum_squares(L.T @ d)), cons)
        prob.solve()
        best = min(best, prob.value)
    return math.sqrt(s * best)


def test_re_matches_convex_oracle_p6():
    rng = np.random.default_rng(4)
    M = gram_matrix(unit_ms(rng.normal(size=(12, 6)) + 0.5 * rng.normal(size=(12, 1))))
    T, C = [0, 1, 3], 1.5
    oracle = _re_oracle(M, T, C)
    est = restricted_eigenvalue_estimate(M, T, C, n_samples=200, rng_seed=1)
    assert abs(est.kappa_hat - oracle) <= 0.05 * oracle
    sampled = restricted_eigenvalue_estimate(M, T, C, n_samples=2, rng_seed=1)
    assert sampled.kappa_hat >= oracle * (1 - 1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_phi_bounds_ordered(seed, m):
    F = unit_ms(np.random.default_rng(seed).normal(size=(15, 6)))
    for mode in Mode:
        d = sparse_eigenvalues(gram_matrix(F), m, mode)
        assert 0 <= d.phi_min <= d.phi_max
