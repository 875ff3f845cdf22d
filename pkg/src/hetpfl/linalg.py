"""Dense linear-algebra kernels: SVD, pseudo-inverse, orthogonal projection,
CCA, linear CKA and cosine similarity.

All functions take and return plain ``numpy`` arrays and never modify their
inputs. Feature matrices are laid out one sample per row.
"""

from __future__ import annotations

import warnings

import numpy as np


class NonUniqueProjectionWarning(UserWarning):
    """The nearest orthogonal matrix is not unique (rank-deficient input)."""


def _check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(m)):
        bad = int(np.size(m) - np.count_nonzero(np.isfinite(m)))
        raise ValueError(f"{name} has {bad} non-finite entries")
    return m


def svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``m = U @ diag(S) @ Vt`` with ``S`` non-increasing."""
    m = _check_finite(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return np.linalg.svd(m, full_matrices=False)


def pinv(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse.

    Singular values below ``tol * max(S)`` are treated as zero. The zero
    matrix maps to the zero matrix of transposed shape.
    """
    u, s, vt = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(m.shape[::-1])
    keep = s > tol * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def nearest_orthogonal(a: np.ndarray, orientation: str = "rows", tol: float = 1e-12) -> np.ndarray:
    """Closest matrix (Frobenius) with orthonormal rows or columns: ``U @ Vt``.

    ``orientation="rows"`` targets ``R @ R.T = I`` and needs rows <= cols;
    ``"columns"`` targets ``R.T @ R = I`` and needs cols <= rows. A zero
    singular value makes the answer non-unique; ``U @ Vt`` is still returned
    and a :class:`NonUniqueProjectionWarning` is emitted.
    """
    a = _check_finite(a)
    rows, cols = a.shape
    if orientation == "rows" and rows > cols:
        raise ValueError(f"row orientation needs rows <= cols, got {a.shape}")
    if orientation == "columns" and cols > rows:
        raise ValueError(f"column orientation needs cols <= rows, got {a.shape}")
    if orientation not in ("rows", "columns"):
        raise ValueError(f"unknown orientation {orientation!r}")
    u, s, vt = svd(a)
    if s[-1] <= tol * max(s[0], 1.0):
        warnings.warn(
            f"input of shape {a.shape} is rank-deficient; orthogonal projection is not unique",
            NonUniqueProjectionWarning,
            stacklevel=2,
        )
    return u @ vt


def orthonormality_error(m: np.ndarray, orientation: str = "rows") -> float:
    """Frobenius norm of ``M M^T - I`` (rows) or ``M^T M - I`` (columns)."""
    m = np.asarray(m, dtype=float)
    gram = m @ m.T if orientation == "rows" else m.T @ m
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))


def _inv_sqrt_psd(c: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(c)
    return (evecs / np.sqrt(evals)) @ evecs.T


def cca(
    hi: np.ndarray,
    hj: np.ndarray,
    r: int,
    ridge: float | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Canonical correlation analysis between two views of the same samples.

    Args:
        hi: ``m x d_i`` features, one sample per row.
        hj: ``m x d_j`` features for the same samples.
        r: number of canonical pairs to return.
        ridge: added to the diagonal of both covariance matrices before
            whitening. ``None`` uses ``1e-6`` times the mean variance of each
            view; ``0`` disables regularisation.

    Returns:
        ``(pi_i, pi_j, corrs)`` with projections of shape ``d_i x r`` and
        ``d_j x r`` and canonical correlations sorted non-increasing.
    """
    hi = _check_finite(hi, "hi")
    hj = _check_finite(hj, "hj")
    m = hi.shape[0]
    if hj.shape[0] != m:
        raise ValueError(f"views disagree on sample count: {m} vs {hj.shape[0]}")
    if m <= r:
        raise ValueError(f"need more samples than components (m={m}, r={r})")
    if r > min(hi.shape[1], hj.shape[1]):
        raise ValueError(f"r={r} exceeds a view dimension {hi.shape[1]}, {hj.shape[1]}")

    xi = hi - hi.mean(axis=0)
    xj = hj - hj.mean(axis=0)
    cii = xi.T @ xi / (m - 1)
    cjj = xj.T @ xj / (m - 1)
    cij = xi.T @ xj / (m - 1)

    def regularise(c: np.ndarray, view: str) -> np.ndarray:
        scale = np.trace(c) / c.shape[0]
        lam = 1e-6 * scale if ridge is None else ridge
        c = c + lam * np.eye(c.shape[0])
        floor = np.linalg.eigvalsh(c)[0]
        if floor <= 1e-14 * max(scale, 1e-300):
            raise ValueError(f"covariance of {view} is singular; raise the ridge (currently {lam:g})")
        return c

    wi = _inv_sqrt_psd(regularise(cii, "hi"))
    wj = _inv_sqrt_psd(regularise(cjj, "hj"))
    u, s, vt = np.linalg.svd(wi @ cij @ wj, full_matrices=False)
    pi_i = wi @ u[:, :r]
    pi_j = wj @ vt[:r].T
    return pi_i, pi_j, np.clip(s[:r], 0.0, None)


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices."""
    x = _check_finite(x, "x")
    y = _check_finite(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("cka needs at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    nx = np.linalg.norm(x.T @ x)
    ny = np.linalg.norm(y.T @ y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cka is undefined for zero-variance features")
    return float(np.linalg.norm(y.T @ x) ** 2 / (nx * ny))


def cosine_with_flag(u: np.ndarray, v: np.ndarray) -> tuple[float, bool]:
    """Cosine similarity plus a degenerate flag.

    If either vector is zero the similarity is defined as 0 and the flag is
    set; callers treat that as "no evidence of relatedness".
    """
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0, True
    c = float(np.dot(u / nu, v / nv))
    return min(1.0, max(-1.0, c)), False


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return cosine_with_flag(u, v)[0]
