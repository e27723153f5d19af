import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvevict import numerics
from kvevict.errors import ConfigError, DimensionError, DomainError

finite = st.floats(-50, 50, allow_nan=False)


def mp_softmax(xs):
    mpmath.mp.dps = 40
    es = [mpmath.exp(mpmath.mpf(float(x))) for x in xs]
    total = mpmath.fsum(es)
    return [float(e / total) for e in es]


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite))
def test_softmax_matches_extended_precision(xs):
    got = numerics.softmax_row(xs)
    assert np.allclose(got, mp_softmax(xs), rtol=1e-12, atol=1e-300)
    assert abs(got.sum() - 1.0) < 1e-12


def test_softmax_survives_huge_logits():
    out = numerics.softmax_row([1000.0, 1000.0, -1000.0])
    assert np.allclose(out, [0.5, 0.5, 0.0])


def test_softmax_empty_raises():
    with pytest.raises(DomainError):
        numerics.softmax_row([])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        numerics.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert np.array_equal(numerics.matmul(np.eye(2), [[1.0], [2.0]]), [[1.0], [2.0]])


def test_l1_norm():
    assert numerics.l1_norm([1.0, -2.0, 3.5]) == 6.5


def test_maxpool_examples():
    assert list(numerics.maxpool1d([1, 5, 2, 0, 0, 3, 1], 3)) == [5, 5, 5, 2, 3, 3, 3]
    assert list(numerics.maxpool1d([4.0], 7)) == [4.0]
    s = np.array([0.3, 0.1, 0.2])
    assert np.array_equal(numerics.maxpool1d(s, 1), s)
    for bad in (0, 2, 4):
        with pytest.raises(ConfigError):
            numerics.maxpool1d(s, bad)


@given(
    hnp.arrays(np.float64, st.integers(1, 30), elements=finite),
    st.sampled_from([1, 3, 5, 7, 9]),
)
def test_maxpool_matches_loop_oracle(s, kernel):
    half = kernel // 2
    expected = [max(s[max(0, i - half) : i + half + 1]) for i in range(len(s))]
    got = numerics.maxpool1d(s, kernel)
    assert np.array_equal(got, expected)
    assert (got >= s).all()


def test_top_k_tie_break_prefers_lower_index():
    assert list(numerics.top_k_indices([0.5, 0.9, 0.5, 0.9], 3)) == [1, 3, 0]
    assert list(numerics.top_k_indices([1.0, 2.0], 0)) == []
    with pytest.raises(DomainError):
        numerics.top_k_indices([1.0], 2)


@given(hnp.arrays(np.float64, st.integers(1, 25), elements=st.integers(-3, 3).map(float)), st.data())
def test_top_k_matches_sorted_oracle(s, data):
    k = data.draw(st.integers(0, len(s)))
    oracle = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
    assert list(numerics.top_k_indices(s, k)) == oracle


def test_population_variance():
    assert numerics.population_variance([0.1, 0.3]) == pytest.approx(0.01, abs=1e-15)
    assert numerics.population_variance([2.0, 2.0, 2.0]) == 0.0


def test_cross_entropy():
    p = [0.25, 0.75]
    assert numerics.cross_entropy(p, p) == pytest.approx(-(0.25 * np.log(0.25) + 0.75 * np.log(0.75)))
    with pytest.raises(DimensionError):
        numerics.cross_entropy([1.0], [0.5, 0.5])


def test_listed_examples():
    assert np.array_equal(numerics.matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])
    assert np.array_equal(numerics.matmul([[1, 0]], [[5], [7]]), [[5]])
    assert np.allclose(numerics.softmax_row([0, 0, 0]), [1 / 3] * 3)
    assert np.allclose(numerics.softmax_row([np.log(2), 0]), [2 / 3, 1 / 3], rtol=1e-15)
    assert numerics.l1_norm([1, -2, 3]) == 6 and numerics.l1_norm(np.zeros(4)) == 0
    assert list(numerics.maxpool1d([1, 2, 3], 3)) == [2, 3, 3]
    assert list(numerics.maxpool1d([0.4] * 9, 7)) == [0.4] * 9
    assert list(numerics.top_k_indices([0.9, 0.1, 0.5], 2)) == [0, 2]
    assert list(numerics.top_k_indices([0.5, 0.5], 1)) == [0]
    assert numerics.cross_entropy([0.5, 0.5], [0.5, 0.5]) == pytest.approx(np.log(2), rel=1e-11)
    assert abs(numerics.cross_entropy([0, 1.0], [0, 1.0])) <= 1e-11


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    ref = [[sum(a[i, k] * b[k, j] for k in range(8)) for j in range(8)] for i in range(8)]
    assert np.allclose(numerics.matmul(a, b), ref, atol=1e-12, rtol=0)


@given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-100, 100)))
def test_variance_matches_two_pass(xs):
    mean = sum(xs) / len(xs)
    ref = sum((x - mean) ** 2 for x in xs) / len(xs)
    assert numerics.population_variance(xs) == pytest.approx(ref, rel=1e-10, abs=1e-14)
