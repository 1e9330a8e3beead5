import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import jacobi_singular_values
from sparsemod import numerics as nx
from sparsemod.errors import LengthMismatch

finite = st.floats(-50, 50, allow_nan=False)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(np.zeros(3)), np.full(3, 1 / 3), rtol=0, atol=1e-15)
    np.testing.assert_allclose(nx.softmax(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], rtol=1e-14)


def test_softmax_large_input_matches_extended_precision():
    out = nx.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out))
    getcontext().prec = 60
    tail = Decimal(-1000).exp()
    expect = [1 / (1 + tail), tail / (1 + tail)]
    assert out[0] == pytest.approx(float(expect[0]), abs=1e-300)
    assert out[1] == pytest.approx(float(expect[1]), rel=1e-12)


@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_on_simplex(v):
    s = nx.softmax(v)
    assert np.all(s >= 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(nx.softmax(v + 7.0), s, atol=1e-14)


def test_log_softmax_consistent():
    v = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(np.exp(nx.log_softmax(v)), nx.softmax(v), rtol=1e-13)


def test_gelu_examples():
    assert nx.gelu(0.0) == 0.0
    assert nx.gelu_prime(0.0) == 0.5
    assert nx.gelu(10.0) == pytest.approx(10.0, rel=1e-15)
    assert isinstance(nx.gelu(1.0), float)


@pytest.mark.parametrize("x", [-2.0, -0.5, 0.3, 1.7])
def test_gelu_prime_matches_central_difference(x):
    h = 1e-5
    fd = (nx.gelu(x + h) - nx.gelu(x - h)) / (2 * h)
    assert abs(nx.gelu_prime(x) - fd) <= 1e-8 * abs(fd)


def test_gelu_vectorised_agrees_with_scalar():
    xs = np.linspace(-4, 4, 17)
    np.testing.assert_array_equal(nx.gelu(xs), [nx.gelu(x) for x in xs])


def test_normalize_examples():
    np.testing.assert_allclose(nx.normalize(np.array([3.0, 4.0])), [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(nx.normalize(np.zeros(2)), [0.0, 0.0])
    v = np.random.default_rng(3).normal(size=4)
    v *= 1e-9 / np.linalg.norm(v)
    assert np.linalg.norm(nx.normalize(v)) == pytest.approx(1.0, abs=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)))
def test_normalize_unit_or_zero(v):
    n = np.linalg.norm(nx.normalize(v))
    assert n == pytest.approx(1.0, abs=1e-12) or n < 1.0


def test_smoothed_normalize_examples():
    np.testing.assert_array_equal(nx.smoothed_normalize(np.zeros(3)), np.zeros(3))
    v = np.array([0.0, 2.0])
    np.testing.assert_array_equal(nx.smoothed_normalize(v), v / 2.0)
    v = np.array([0.3, 0.4])
    assert np.linalg.norm(nx.smoothed_normalize(v)) == pytest.approx(0.5, abs=1e-15)


@given(st.floats(0, 3))
def test_smoothstep_range_and_derivative(r):
    s = nx.smoothstep(r)
    assert 0.0 <= s <= 1.0
    if 1e-3 < r < 1 - 1e-3:
        h = 1e-6
        fd = (nx.smoothstep(r + h) - nx.smoothstep(r - h)) / (2 * h)
        assert nx.smoothstep_prime(r) == pytest.approx(fd, abs=1e-7)


def test_operator_norm_examples():
    assert nx.operator_norm(np.eye(3)) == pytest.approx(1.0, rel=1e-12)
    assert nx.operator_norm(np.diag([2.0, 5.0])) == pytest.approx(5.0, rel=1e-12)
    assert nx.operator_norm(np.zeros((3, 2))) == 0.0
    # all-ones start vector lies in the null space here
    assert nx.operator_norm(np.array([[1.0, -1.0]])) == pytest.approx(math.sqrt(2), rel=1e-12)


def test_operator_norm_random_4x7_vs_jacobi():
    m = np.random.default_rng(11).normal(size=(4, 7))
    ref = jacobi_singular_values(m)[0]
    assert abs(nx.operator_norm(m) - ref) <= 1e-8 * ref


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_operator_norm_property(r, c, seed):
    m = np.random.default_rng(seed).normal(size=(r, c))
    ref = jacobi_singular_values(m)[0]
    assert nx.operator_norm(m) == pytest.approx(ref, rel=1e-8)


def test_tv_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert nx.tv_distance(p, p) == 0.0
    assert nx.tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    with pytest.raises(LengthMismatch):
        nx.tv_distance([1.0, 0.0], [1.0, 0.0, 0.0])


@given(st.integers(2, 10), st.integers(0, 2**31))
def test_tv_to_one_hot_identity(p, seed):
    rng = np.random.default_rng(seed)
    phat = rng.dirichlet(np.ones(p))
    y = int(rng.integers(p))
    assert nx.tv_distance(np.eye(p)[y], phat) == pytest.approx(1 - phat[y], abs=1e-12)
