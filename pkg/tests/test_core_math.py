import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import largest_singular_value, naive_matmul
from palm_lab.core_math import (ConvergenceError, DimensionError, NonFiniteError, SeededRng, as_matrix,
                                finite_difference_jacobian, frobenius_norm, glorot_bound, init_uniform, matmul,
                                softmax_rows, spectral_norm)


def test_rng_is_deterministic_and_spawn_independent():
    a, b = SeededRng(7), SeededRng(7)
    assert np.array_equal(a.random(10), b.random(10))
    assert not np.array_equal(SeededRng(7).spawn(1).random(5), SeededRng(7).spawn(2).random(5))
    assert np.array_equal(SeededRng(7).spawn(3).random(5), SeededRng(7).spawn(3).random(5))


def test_rng_ranges_and_moments():
    r = SeededRng(1)
    u = r.random(20000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    z = r.normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03
    ints = r.integers(5, 1000)
    assert set(ints.tolist()) == set(range(5))
    assert sorted(r.permutation(9).tolist()) == list(range(9))


def test_rng_scalar_draws():
    r = SeededRng(3)
    assert isinstance(r.random(), float)
    assert isinstance(r.integers(4), int)
    with pytest.raises(ValueError):
        r.integers(0)


def test_matmul_matches_loops():
    r = SeededRng(2)
    a, b = r.normal((4, 3)), r.normal((3, 5))
    assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-14)
    with pytest.raises(DimensionError):
        matmul(a, a)


def test_as_matrix_rejects_bad_input():
    with pytest.raises(DimensionError):
        as_matrix([1.0, 2.0])
    with pytest.raises(NonFiniteError):
        as_matrix([[np.nan]])
    with pytest.raises(NonFiniteError):
        as_matrix([[-np.inf]])
    assert as_matrix([[-np.inf, 0.0]], allow_neg_inf=True).shape == (1, 2)


def test_softmax_masked_entries_are_exact_zero():
    p = softmax_rows([[0.0, -np.inf, 1.0], [2.0, 2.0, 2.0]])
    assert p[0, 1] == 0.0
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p[1], 1 / 3)
    with pytest.raises(ValueError, match="fully masked"):
        softmax_rows([[-np.inf, -np.inf]])


def test_softmax_is_shift_invariant_for_large_logits():
    p = softmax_rows([[1000.0, 1001.0]])
    q = softmax_rows([[0.0, 1.0]])
    assert np.allclose(p, q)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_spectral_norm_matches_jacobi(rows, cols, seed):
    m = SeededRng(seed).normal((rows, cols))
    assert spectral_norm(m) == pytest.approx(largest_singular_value(m), rel=1e-8)


def test_spectral_norm_known_values():
    assert spectral_norm(np.diag([3.0, -5.0, 1.0])) == pytest.approx(5.0, rel=1e-10)
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    assert spectral_norm(np.ones((2, 3))) == pytest.approx(math.sqrt(6.0), rel=1e-10)


def test_spectral_norm_reports_non_convergence():
    # one step cannot meet the relative tolerance
    m = SeededRng(4).normal((5, 5))
    with pytest.raises(ConvergenceError) as info:
        spectral_norm(m, max_iter=1)
    assert info.value.estimate >= 0.0


def test_frobenius_norm():
    assert frobenius_norm([[3.0, 4.0]]) == 5.0


def test_init_uniform_bounds():
    r = SeededRng(0)
    w = init_uniform(30, 20, None, r)
    b = glorot_bound(30, 20)
    assert w.shape == (30, 20)
    assert np.abs(w).max() <= b
    with pytest.raises(ValueError):
        init_uniform(2, 2, 0.0, r)


def test_finite_difference_jacobian_of_linear_map():
    a = SeededRng(5).normal((3, 4))
    jac = finite_difference_jacobian(lambda x: a @ x, np.ones(4))
    assert np.allclose(jac, a, atol=1e-9)
    with pytest.raises(ValueError):
        finite_difference_jacobian(lambda x: x, np.ones(2), h=0.0)


def test_finite_difference_jacobian_of_nonlinear_map():
    x0 = np.array([0.3, -0.7])
    jac = finite_difference_jacobian(lambda x: np.array([np.sin(x[0]) * x[1], x[0] ** 2]), x0)
    exact = np.array([[np.cos(0.3) * -0.7, np.sin(0.3)], [0.6, 0.0]])
    assert np.allclose(jac, exact, atol=1e-9)
