import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import brute_vlad, random_instance, separated_instance
from resenc.encoding import (
    aggregate,
    assign,
    assign_unshifted,
    encode_backward,
    encode_forward,
    l2norm_backward,
    l2norm_forward,
    residuals,
)
from resenc.gradcheck import central_diff, rel_error
from resenc.numeric import Rng, ShapeError, colsum
from resenc.reference import avg_pool, vlad


# residuals ---------------------------------------------------------------

def test_residuals_zero_on_matching_rows():
    X, _, _ = random_instance(4, 4, 3, seed=1)
    R = residuals(X, X.copy())
    for i in range(4):
        assert np.all(R[i, i] == 0.0)


def test_residuals_zero_codeword():
    X, _, _ = random_instance(5, 1, 3, seed=2)
    assert np.array_equal(residuals(X, np.zeros((1, 3)))[:, 0, :], X)


def test_residuals_loop_oracle():
    X, C, _ = random_instance(3, 2, 4, seed=3)
    R = residuals(X, C)
    for i in range(3):
        for k in range(2):
            for d in range(4):
                assert R[i, k, d] == X[i, d] - C[k, d]


def test_residuals_shape_error():
    with pytest.raises(ShapeError):
        residuals(np.zeros((2, 3)), np.zeros((2, 4)))


# assignment --------------------------------------------------------------

def test_assign_symmetric_split():
    X = np.array([[0.0, 0.0]])
    C = np.array([[1.0, 0.0], [0.0, -1.0]])
    a = assign(residuals(X, C), [0.7, 0.7]).A
    assert a[0, 0] == a[0, 1] == 0.5


def test_assign_direct_evaluation():
    X = np.zeros((1, 3))
    C = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    a = assign(residuals(X, C), [1.0, 1.0]).A
    expected = 1.0 / (1.0 + math.exp(-1.0))
    assert a[0, 0] == pytest.approx(expected, abs=1e-15)
    assert a[0, 0] == pytest.approx(0.73106, abs=1e-5)
    assert a[0, 1] == pytest.approx(0.26894, abs=1e-5)


@pytest.mark.parametrize("s", [1.0, -1.0])
def test_assign_large_norm_stays_finite(s):
    rng = Rng(0)
    X = rng.normal((6, 4))
    X *= 1e3 / np.linalg.norm(X, axis=1, keepdims=True)
    C = rng.normal((3, 4))
    R = residuals(X, C)
    a = assign(R, [s] * 3)
    assert np.all(np.isfinite(a.A))
    assert np.allclose(a.A.sum(axis=1), 1.0, atol=1e-12)
    # without the shift the exponentials under- or overflow
    assert not np.all(np.isfinite(assign_unshifted(R, [s] * 3)))


def test_assign_caches_consistent():
    X, C, s = random_instance(7, 4, 3, seed=4)
    a = assign(residuals(X, C), s)
    assert np.array_equal(a.A, a.f / a.h[:, None])
    assert np.all(a.h >= 1.0)
    assert np.allclose(a.g, a.h[:, None] - a.f)


def test_shift_invariance():
    for seed in range(5):
        X, C, s = random_instance(9, 5, 4, seed=seed, s_range=(-0.5, 1.0))
        R = residuals(X, C)
        assert np.abs(assign(R, s).A - assign_unshifted(R, s)).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**32))
def test_assignments_row_stochastic(N, K, D, seed):
    X, C, s = random_instance(N, K, D, seed, s_range=(-1.0, 3.0))
    A = assign(residuals(X, C), s).A
    assert np.all(A >= 0.0) and np.all(A <= 1.0)
    assert np.abs(A.sum(axis=1) - 1.0).max() <= 1e-12


# aggregation -------------------------------------------------------------

def test_aggregate_sum_pooling_exact():
    X, _, _ = random_instance(9, 1, 5, seed=5)
    E, _ = encode_forward(X, np.zeros((1, 5)), [0.3])
    expected = np.zeros((1, 5))
    for i in range(9):
        expected[0] += X[i]
    assert np.array_equal(E, expected)
    assert np.array_equal(E, colsum(X))


def test_aggregate_zero_residual_row():
    C = np.array([[1.0, 2.0], [5.0, 5.0]])
    E, _ = encode_forward(C[:1].copy(), C, [1.0, 1.0])
    assert np.all(E[0] == 0.0)


def test_aggregate_double_loop_oracle():
    X, C, s = random_instance(5, 3, 2, seed=6)
    R = residuals(X, C)
    A = assign(R, s).A
    E = aggregate(A, R)
    for k in range(3):
        for d in range(2):
            acc = 0.0
            for i in range(5):
                acc += A[i, k] * R[i, k, d]
            assert E[k, d] == acc


# encode_forward ------------------------------------------------------------

@pytest.mark.parametrize("N", [1, 2, 10, 1000])
def test_fixed_length_output(N):
    X, C, s = random_instance(N, 4, 3, seed=N)
    E, _ = encode_forward(X, C, s)
    assert E.shape == (4, 3)


def test_permutation_invariance():
    X, C, s = random_instance(40, 6, 5, seed=7)
    E, _ = encode_forward(X, C, s)
    for seed in range(3):
        Ep, _ = encode_forward(X[Rng(seed).permutation(40)], C, s)
        assert np.abs(E - Ep).max() <= 1e-12


def test_vlad_limit():
    X, C = separated_instance(0)
    E, cache = encode_forward(X, C, np.full(C.shape[0], 1e4))
    onehot = np.zeros_like(cache.A)
    onehot[np.arange(X.shape[0]), np.argmin(cache.assignment.sqnorm, axis=1)] = 1.0
    assert np.abs(cache.A - onehot).max() <= 1e-6
    assert np.abs(E - vlad(X, C)).max() <= 1e-6
    assert np.abs(E - brute_vlad(X, C)).max() <= 1e-6


def test_avg_pool_equivalence_after_normalization():
    X, _, _ = random_instance(13, 1, 6, seed=8)
    E, _ = encode_forward(X, np.zeros((1, 6)), [0.5])
    a, _ = l2norm_forward(E)
    b, _ = l2norm_forward(avg_pool(X))
    assert np.abs(a - b).max() <= 1e-12


@pytest.mark.parametrize("s", [1.0, 10.0])
def test_domain_transfer_bound(s):
    bound = 1.0 / math.sqrt(2.0 * math.e * s)
    worst = 0.0
    for seed in range(20):
        X, C, _ = random_instance(6, 5, 3, seed=seed)
        X[0] = C[seed % 5]  # a descriptor sitting exactly on a codeword
        k = seed % 5
        R = residuals(X, C)
        A = assign(R, [s] * 5).A
        for j in range(5):
            if j == k:
                continue
            contrib = np.linalg.norm(A[0, j] * R[0, j])
            rnorm = np.linalg.norm(R[0, j])
            assert contrib <= rnorm * math.exp(-s * rnorm**2) * (1 + 1e-12)
            worst = max(worst, contrib)
    assert worst <= bound


# encode_backward ------------------------------------------------------------

def test_backward_sum_pooling():
    X, _, _ = random_instance(6, 1, 4, seed=9)
    _, cache = encode_forward(X, np.zeros((1, 4)), [0.4])
    dE = Rng(1).normal((1, 4))
    g = encode_backward(cache, dE)
    assert np.array_equal(g.dX, np.repeat(dE, 6, axis=0))
    assert np.all(g.ds == 0.0)


def test_backward_zero_upstream():
    X, C, s = random_instance(5, 3, 2, seed=10)
    _, cache = encode_forward(X, C, s)
    g = encode_backward(cache, np.zeros((3, 2)))
    assert not g.dX.any() and not g.dC.any() and not g.ds.any()


def test_backward_matches_finite_differences_raw_encoding():
    # loss = <E, W> without normalisation, checked directly
    X, C, s = random_instance(5, 4, 3, seed=11)
    W = Rng(3).normal((4, 3))

    def loss(X=X, C=C, s=s):
        return float((encode_forward(X, C, s)[0] * W).sum())

    _, cache = encode_forward(X, C, s)
    g = encode_backward(cache, W)
    assert rel_error(g.dX, central_diff(lambda t: loss(X=t), X)) < 1e-6
    assert rel_error(g.dC, central_diff(lambda t: loss(C=t), C)) < 1e-6
    assert rel_error(g.ds, central_diff(lambda t: loss(s=t), s)) < 1e-6


def test_backward_shape_error():
    X, C, s = random_instance(3, 2, 2, seed=0)
    _, cache = encode_forward(X, C, s)
    with pytest.raises(ShapeError):
        encode_backward(cache, np.zeros((2, 3)))


def test_duplicate_codewords_split_weight():
    X, C, _ = random_instance(4, 1, 3, seed=12)
    C2 = np.vstack([C, C])
    _, cache = encode_forward(X, C2, [0.5, 0.5])
    assert np.allclose(cache.A, 0.5)


# l2 normalisation -------------------------------------------------------------

def test_l2norm_345():
    v, cache = l2norm_forward(np.array([3.0, 4.0]))
    assert np.allclose(v, [0.6, 0.8], atol=1e-15)
    assert cache.norm == 5.0


def test_l2norm_zero_vector():
    v, _ = l2norm_forward(np.zeros(6))
    assert np.array_equal(v, np.zeros(6))


def test_l2norm_unit_output():
    v, _ = l2norm_forward(Rng(5).normal((40,)))
    assert abs(np.sqrt((v * v).sum()) - 1.0) <= 1e-12


def test_l2norm_backward_orthogonal_and_radial():
    v = np.array([3.0, 4.0])
    vhat, cache = l2norm_forward(v)
    ortho = np.array([-0.8, 0.6])
    assert np.allclose(l2norm_backward(cache, ortho), ortho / 5.0, atol=1e-15)
    assert np.abs(l2norm_backward(cache, 2.5 * vhat)).max() <= 1e-12


@pytest.mark.parametrize("mode", ["global", "per_codeword"])
def test_l2norm_backward_finite_differences(mode):
    v = Rng(6).normal((4, 3))
    w = Rng(7).normal((4, 3))
    _, cache = l2norm_forward(v, mode)
    analytic = l2norm_backward(cache, w)
    numeric = central_diff(lambda t: float((l2norm_forward(t, mode)[0] * w).sum()), v)
    assert rel_error(analytic, numeric) < 1e-7


def test_per_codeword_rows_unit():
    v, _ = l2norm_forward(Rng(8).normal((5, 3)), "per_codeword")
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
