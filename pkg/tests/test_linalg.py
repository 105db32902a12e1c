import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from giva.errors import DegeneracyError, DimensionError, NumericalError, RankError
from giva.linalg import (
    SvdFactors,
    as_matrix,
    frobenius_norm,
    orthonormality_residual,
    qr_orthonormal,
    svd_full,
    svd_lowrank,
    truncate_rank,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(max_side=12):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_as_matrix_rejects_bad_input():
    with pytest.raises(DimensionError):
        as_matrix(np.zeros(3))
    with pytest.raises(NumericalError):
        as_matrix([[1.0, np.nan]])


def test_svd_diagonal():
    f = svd_full(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(f.S, [3, 2, 1], atol=1e-15)
    np.testing.assert_allclose(f.U, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(f.V, np.eye(3), atol=1e-15)


def test_svd_zero_matrix():
    f = svd_full(np.zeros((4, 3)))
    np.testing.assert_array_equal(f.S, np.zeros(3))
    assert orthonormality_residual(f.U) < 1e-12
    assert orthonormality_residual(f.V) < 1e-12


def test_svd_random_against_lapack():
    M = np.random.default_rng(0).standard_normal((16, 12))
    f = svd_full(M)
    assert np.max(np.abs(f.reconstruct() - M)) < 1e-9 * np.linalg.norm(M)
    assert orthonormality_residual(f.U) < 1e-10
    assert orthonormality_residual(f.V) < 1e-10
    np.testing.assert_allclose(f.S, np.linalg.svd(M, compute_uv=False), rtol=1e-12)


def test_svd_wide_and_empty():
    M = np.random.default_rng(1).standard_normal((5, 9))
    f = svd_full(M)
    assert f.U.shape == (5, 5) and f.V.shape == (9, 5)
    assert np.max(np.abs(f.reconstruct() - M)) < 1e-12
    with pytest.raises(DimensionError):
        svd_full(np.zeros((0, 3)))


def test_svd_sign_convention():
    f = svd_full(np.random.default_rng(2).standard_normal((10, 7)))
    idx = np.argmax(np.abs(f.U), axis=0)
    assert np.all(f.U[idx, np.arange(f.k)] >= 0)


def test_svd_rank_deficient_completes_basis():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 15))
    f = svd_full(M)
    assert f.k == 15
    assert orthonormality_residual(f.U) < 1e-10
    assert np.max(f.S[3:]) < 1e-12 * f.S[0]


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_svd_invariants(M):
    f = svd_full(M)
    assert f.k == min(M.shape)
    assert np.all(np.diff(f.S) <= 1e-12 * max(f.S[0], 1.0))
    assert np.all(f.S >= 0)
    assert orthonormality_residual(f.U) < 1e-10
    assert orthonormality_residual(f.V) < 1e-10
    assert np.max(np.abs(f.reconstruct() - M)) <= 1e-9 * np.max(np.abs(M)) * max(M.shape)


@settings(max_examples=60, deadline=None)
@given(matrices(), st.data())
def test_eckart_young_property(M, data):
    f = svd_full(M)
    r = data.draw(st.integers(0, f.k))
    err = np.linalg.norm(M - truncate_rank(f, r))
    tail = np.sqrt(np.sum(np.linalg.svd(M, compute_uv=False)[r:] ** 2))
    assert err == pytest.approx(tail, rel=1e-9, abs=1e-12 * max(np.linalg.norm(M), 1.0))


def test_lowrank_known_spectrum():
    f = svd_lowrank(np.diag([10.0, 5.0, 1.0, 0.1]), 2)
    np.testing.assert_allclose(f.S, [10, 5], rtol=1e-6)


def test_lowrank_exact_rank():
    rng = np.random.default_rng(4)
    M = rng.standard_normal((32, 3)) @ rng.standard_normal((3, 24))
    f = svd_lowrank(M, 3)
    assert np.linalg.norm(M - f.reconstruct()) < 1e-8


def test_lowrank_deterministic():
    M = np.random.default_rng(5).standard_normal((30, 20))
    a, b = svd_lowrank(M, 4, seed=11), svd_lowrank(M, 4, seed=11)
    assert a.U.tobytes() == b.U.tobytes() and a.S.tobytes() == b.S.tobytes() and a.V.tobytes() == b.V.tobytes()


def test_lowrank_rank_errors():
    M = np.ones((4, 3))
    for r in (0, 4):
        with pytest.raises(RankError):
            svd_lowrank(M, r)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-12, 4), st.integers(1, 6))
def test_lowrank_orthonormal_any_conditioning(seed, log_cond, r):
    rng = np.random.default_rng(seed)
    U = np.linalg.qr(rng.standard_normal((20, 10)))[0]
    V = np.linalg.qr(rng.standard_normal((14, 10)))[0]
    s = np.logspace(0, log_cond, 10)
    f = svd_lowrank((U * s) @ V.T, r, seed=seed)
    assert orthonormality_residual(f.U) < 1e-10
    assert orthonormality_residual(f.V) < 1e-10


def test_qr_identity_and_gram():
    np.testing.assert_allclose(qr_orthonormal(np.eye(3)), np.eye(3), atol=1e-15)
    Q = qr_orthonormal(np.array([[1.0, 0], [1, 0], [0, 1]]))
    assert orthonormality_residual(Q) < 1e-10


def test_qr_duplicate_columns_named():
    X = np.random.default_rng(6).standard_normal((5, 3))
    X[:, 2] = X[:, 0]
    with pytest.raises(DegeneracyError, match="column 2"):
        qr_orthonormal(X)
    with pytest.raises(DimensionError):
        qr_orthonormal(np.ones((2, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 8))
def test_qr_span_and_idempotence(seed, r, extra):
    X = np.random.default_rng(seed).standard_normal((r + extra, r))
    Q = qr_orthonormal(X)
    assert orthonormality_residual(Q) < 1e-10
    # same span: projecting X onto span(Q) leaves it unchanged
    assert np.linalg.norm(X - Q @ (Q.T @ X)) < 1e-10 * np.linalg.norm(X)
    Q2 = qr_orthonormal(Q)
    assert np.max(np.abs(Q2.T @ Q2 - Q.T @ Q)) <= 1e-12
    np.testing.assert_allclose(np.abs(Q2), np.abs(Q), atol=1e-12)


def test_frobenius():
    assert frobenius_norm([[3.0, 4.0]]) == 5.0
    assert frobenius_norm(np.zeros((3, 2))) == 0.0
    M = np.random.default_rng(7).standard_normal((8, 8))
    assert frobenius_norm(M) == pytest.approx(np.sqrt(np.trace(M.T @ M)), abs=1e-12)


def test_truncate_rank_examples():
    D = np.diag([3.0, 2.0, 1.0])
    f = svd_full(D)
    np.testing.assert_allclose(truncate_rank(f, 1), np.diag([3.0, 0, 0]), atol=1e-15)
    np.testing.assert_allclose(truncate_rank(f, 3), D, atol=1e-9)
    assert np.linalg.norm(D - truncate_rank(f, 2)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(RankError):
        truncate_rank(f, 4)


def test_factors_are_frozen_dataclass():
    f = SvdFactors(np.eye(2), np.ones(2), np.eye(2))
    with pytest.raises(Exception):
        f.S = np.zeros(2)
