import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from qkspace.errors import DimensionError, NumericalError
from qkspace.tensorcore import (explained_variance_ratio, make_rng, matmul, orthonormalize, pca,
                                projector, random_orthonormal, svd)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_matmul_identity_and_small_case():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), np.array([[2.0], [4.0]]))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_nonfinite():
    with pytest.raises(NumericalError):
        matmul(np.array([[np.nan]]), np.ones((1, 1)))


def _check_svd(a, res):
    k = len(res.s)
    assert np.all(np.diff(res.s) <= 1e-12)
    assert np.all(res.s >= 0)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(res.vt @ res.vt.T, np.eye(k), atol=1e-10)
    norm = np.linalg.norm(a)
    assert np.linalg.norm(a - res.reconstruct()) <= 1e-9 * max(norm, 1e-300) + 1e-300


def test_svd_diagonal():
    res = svd(np.diag([3.0, 2.0, 1.0]))
    np.testing.assert_allclose(res.s, [3, 2, 1], atol=1e-14)
    np.testing.assert_allclose(np.abs(res.u), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(np.abs(res.vt), np.eye(3), atol=1e-14)


def test_svd_rank_one():
    rng = np.random.default_rng(1)
    u = rng.standard_normal(5); u /= np.linalg.norm(u)
    v = rng.standard_normal(4); v /= np.linalg.norm(v)
    res = svd(np.outer(u, v))
    np.testing.assert_allclose(res.s, [1, 0, 0, 0], atol=1e-12)
    _check_svd(np.outer(u, v), res)


def test_svd_random_16():
    a = np.random.default_rng(2).standard_normal((16, 16))
    res = svd(a)
    _check_svd(a, res)
    np.testing.assert_allclose(res.s, np.linalg.svd(a, compute_uv=False), rtol=1e-10)


def test_svd_sign_convention():
    a = np.random.default_rng(3).standard_normal((7, 5))
    res = svd(a)
    for j in range(res.u.shape[1]):
        col = res.u[:, j]
        assert col[np.argmax(np.abs(col))] > 0
    again = svd(a.copy())
    assert np.array_equal(res.u, again.u) and np.array_equal(res.vt, again.vt)


def test_svd_zero_matrix():
    res = svd(np.zeros((4, 3)))
    assert np.all(res.s == 0)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(3), atol=1e-12)


shapes = st.tuples(st.integers(1, 64), st.integers(1, 64))


@given(st.data())
def test_svd_reconstruction_property(data):
    m, n = data.draw(shapes)
    seed = data.draw(st.integers(0, 2**31))
    rank = data.draw(st.integers(1, min(m, n)))
    rng = np.random.default_rng(seed)
    # low-rank and full-rank inputs both appear
    a = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    _check_svd(a, svd(a))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_svd_arbitrary_small_matrices(a):
    _check_svd(a, svd(a))


def test_pca_collinear_points():
    t = np.linspace(-2, 3, 11)
    direction = np.array([1.0, 2.0, 2.0]) / 3.0
    pts = np.outer(t, direction) + np.array([5.0, -1.0, 0.5])
    scores = pca(pts, 1)[:, 0]
    expected = t - t.mean()
    sign = np.sign(scores @ expected)
    np.testing.assert_allclose(sign * scores, expected, atol=1e-12)


def test_pca_isotropic_variance_fractions():
    d, n = 10, 20_000
    pts = np.random.default_rng(4).standard_normal((n, d))
    frac = explained_variance_ratio(pts)
    # leading fractions of an isotropic cloud stay near 1/d; sampling spread ~ sqrt(8/n)
    assert abs(frac[:2].sum() - 2 / d) < 0.03
    assert np.all(np.diff(frac) <= 1e-15)


def test_pca_duplication_and_shift_invariance():
    pts = np.random.default_rng(5).standard_normal((30, 4))
    base = pca(pts, 2)
    dup = pca(np.vstack([pts, pts]), 2)
    np.testing.assert_allclose(dup[:30], base, atol=1e-10)
    shifted = pca(pts + np.array([3.0, -7.0, 1.0, 100.0]), 2)
    np.testing.assert_allclose(shifted, base, atol=1e-10)


def test_pca_errors():
    with pytest.raises(DimensionError):
        pca(np.ones((5, 3)), 4)
    with pytest.raises(DimensionError):
        pca(np.ones((1, 3)), 1)


def test_random_orthonormal():
    q = random_orthonormal(make_rng(0, "a"), 6, 6)
    assert abs(abs(np.linalg.det(q)) - 1) < 1e-10
    q = random_orthonormal(make_rng(0, "b"), 8, 3)
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-10)
    other = random_orthonormal(make_rng(1, "b"), 8, 3)
    assert np.linalg.norm(q - other) > 0
    with pytest.raises(DimensionError):
        random_orthonormal(make_rng(0), 3, 4)


def test_orthonormalize_drops_dependent_columns():
    a = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    q = orthonormalize(a)
    assert q.shape == (3, 2)
    p = projector(q)
    np.testing.assert_allclose(p @ p, p, atol=1e-12)


def test_rng_streams_reproducible_across_processes():
    here = make_rng(1234, "x", 5).standard_normal(1000)
    code = ("import numpy as np; from qkspace.tensorcore import make_rng;"
            "print(make_rng(1234, 'x', 5).standard_normal(1000).tobytes().hex())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, check=True, text=True).stdout
    there = np.frombuffer(bytes.fromhex(out.strip()), dtype=np.float64)
    assert np.array_equal(here, there)
    assert not np.array_equal(here, make_rng(1234, "x", 6).standard_normal(1000))
