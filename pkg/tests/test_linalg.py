import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_row_orthonormal
from hetpfl import linalg

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def matrices(max_side=64):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite)
    )


def test_svd_diagonal_and_identity():
    u, s, vt = linalg.svd(np.diag([3.0, 2.0]))
    np.testing.assert_allclose(s, [3.0, 2.0])
    np.testing.assert_allclose(np.abs(u), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(np.abs(vt), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(linalg.svd(np.eye(3))[1], [1.0, 1.0, 1.0])


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        linalg.svd(np.array([[1.0, np.nan]]))


@given(matrices())
def test_svd_reconstruction_and_ordering(m):
    u, s, vt = linalg.svd(m)
    scale = max(np.linalg.norm(m), 1e-300)
    assert np.linalg.norm(u @ np.diag(s) @ vt - m) / scale <= 1e-8 or np.linalg.norm(m) == 0
    assert np.all(s >= 0) and np.all(np.diff(s) <= 1e-12 * max(s[0], 1.0))
    k = s.size
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-8)
    np.testing.assert_allclose(vt @ vt.T, np.eye(k), atol=1e-8)


def test_pinv_examples(rng):
    np.testing.assert_allclose(linalg.pinv(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]))
    np.testing.assert_array_equal(linalg.pinv(np.zeros((2, 3))), np.zeros((3, 2)))
    m = rng.standard_normal((4, 4)) + 4 * np.eye(4)
    np.testing.assert_allclose(m @ linalg.pinv(m), np.eye(4), atol=1e-6)


@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31))
def test_pinv_moore_penrose_identities(rows, cols, rank, seed):
    rng = np.random.default_rng(seed)
    rank = min(rank, rows, cols)
    m = rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))
    p = linalg.pinv(m, tol=1e-10)
    np.testing.assert_allclose(m @ p @ m, m, atol=1e-6)
    np.testing.assert_allclose(p @ m @ p, p, atol=1e-6)
    np.testing.assert_allclose((m @ p).T, m @ p, atol=1e-6)
    np.testing.assert_allclose((p @ m).T, p @ m, atol=1e-6)


def test_nearest_orthogonal_examples(rng):
    a = random_row_orthonormal(rng, 3, 6)
    np.testing.assert_allclose(linalg.nearest_orthogonal(a), a, atol=1e-10)
    np.testing.assert_allclose(linalg.nearest_orthogonal(np.diag([2.0, 3.0])), np.eye(2), atol=1e-12)


def test_nearest_orthogonal_sampled_minimality(rng):
    a = rng.standard_normal((2, 5))
    r = linalg.nearest_orthogonal(a)
    best = np.linalg.norm(a - r)
    for _ in range(1000):
        assert best <= np.linalg.norm(a - random_row_orthonormal(rng, 2, 5)) + 1e-12


def test_nearest_orthogonal_flags_rank_deficiency():
    a = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    with pytest.warns(linalg.NonUniqueProjectionWarning):
        r = linalg.nearest_orthogonal(a)
    np.testing.assert_allclose(r @ r.T, np.eye(2), atol=1e-10)


def test_nearest_orthogonal_orientation_checks():
    with pytest.raises(ValueError):
        linalg.nearest_orthogonal(np.ones((3, 2)), "rows")
    with pytest.raises(ValueError):
        linalg.nearest_orthogonal(np.ones((2, 3)), "columns")


@given(st.integers(1, 6), st.integers(0, 5), st.integers(0, 2**31), st.sampled_from(["rows", "columns"]))
def test_nearest_orthogonal_idempotent_and_orthonormal(r, extra, seed, orient):
    rng = np.random.default_rng(seed)
    shape = (r, r + extra) if orient == "rows" else (r + extra, r)
    a = rng.standard_normal(shape)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.NonUniqueProjectionWarning)
        once = linalg.nearest_orthogonal(a, orient)
        twice = linalg.nearest_orthogonal(once, orient)
    assert linalg.orthonormality_error(once, orient) <= 1e-6
    np.testing.assert_allclose(twice, once, atol=1e-10)


def test_cca_rotated_copy_and_independent(rng):
    x = rng.standard_normal((500, 8))
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    _, _, corrs = linalg.cca(x, x @ q, 8, ridge=0.0)
    np.testing.assert_allclose(corrs, 1.0, atol=1e-6)
    # the default ridge shrinks an exact relation by about its relative size
    _, _, shrunk = linalg.cca(x, x @ q, 8)
    np.testing.assert_allclose(shrunk, 1.0, atol=1e-5)
    _, _, ind = linalg.cca(x, rng.standard_normal((500, 8)), 8)
    assert ind[0] < 0.3
    assert np.all(np.diff(corrs) <= 1e-12) and np.all(ind >= 0) and np.all(ind <= 1 + 1e-9)


def test_cca_first_pair_beats_random_projections(rng):
    m = 400
    z = rng.standard_normal((m, 2))
    x = np.hstack([z, rng.standard_normal((m, 3))]) @ rng.standard_normal((5, 5))
    y = np.hstack([z[:, :1] + 0.5 * rng.standard_normal((m, 1)), rng.standard_normal((m, 3))])
    _, _, corrs = linalg.cca(x, y, 2)
    xc, yc = x - x.mean(0), y - y.mean(0)
    for _ in range(1000):
        u, v = rng.standard_normal(5), rng.standard_normal(4)
        c = abs(np.corrcoef(xc @ u, yc @ v)[0, 1])
        assert corrs[0] >= c - 1e-9


def test_cca_projected_features_are_correlated_pairs(rng):
    x = rng.standard_normal((300, 4))
    y = x @ rng.standard_normal((4, 6)) + 0.1 * rng.standard_normal((300, 6))
    pi, pj, corrs = linalg.cca(x, y, 3)
    a, b = (x - x.mean(0)) @ pi, (y - y.mean(0)) @ pj
    for k in range(3):
        np.testing.assert_allclose(np.corrcoef(a[:, k], b[:, k])[0, 1], corrs[k], atol=1e-5)


def test_cca_errors(rng):
    with pytest.raises(ValueError, match="more samples"):
        linalg.cca(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), 3)
    x = rng.standard_normal((50, 3))
    with pytest.raises(ValueError, match="ridge"):
        linalg.cca(np.hstack([x, x[:, :1]]), x, 2, ridge=0.0)


@given(st.integers(0, 2**31))
def test_cca_invariant_under_invertible_transforms(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((200, 4))
    y = x @ rng.standard_normal((4, 4)) + rng.standard_normal((200, 4))
    t = rng.standard_normal((4, 4)) + 3 * np.eye(4)
    _, _, c1 = linalg.cca(x, y, 4, ridge=0.0)
    _, _, c2 = linalg.cca(x @ t, y, 4, ridge=0.0)
    np.testing.assert_allclose(c1, c2, atol=1e-5)


def test_cka_examples(rng):
    x = rng.standard_normal((200, 8))
    assert linalg.cka(x, x) == pytest.approx(1.0, abs=1e-12)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    assert linalg.cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)
    assert linalg.cka(x, rng.standard_normal((200, 8))) < 0.3
    with pytest.raises(ValueError):
        linalg.cka(np.ones((5, 2)), x[:5])


@given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 6), st.integers(1, 6))
def test_cka_symmetric_and_bounded(seed, m, dx, dy):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((m, dx)), rng.standard_normal((m, dy))
    a, b = linalg.cka(x, y), linalg.cka(y, x)
    assert abs(a - b) <= 1e-12
    assert -1e-9 <= a <= 1 + 1e-9


def test_cosine_examples():
    u = np.array([1.0, 2.0, -1.0])
    assert linalg.cosine(u, u) == pytest.approx(1.0)
    assert linalg.cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert linalg.cosine(u, 3 * u) == pytest.approx(1.0)
    assert linalg.cosine_with_flag(np.zeros(3), np.zeros(3)) == (0.0, True)
    with pytest.raises(ValueError):
        linalg.cosine([1.0], [1.0, 2.0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_positive_scale_invariance(u, v, a, b):
    c1 = linalg.cosine(u, v)
    c2 = linalg.cosine(a * u, b * v)
    assert -1.0 <= c1 <= 1.0
    assert c2 == pytest.approx(c1, abs=1e-12)
