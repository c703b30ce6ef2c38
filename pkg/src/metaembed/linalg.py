"""Dense matrix helpers: checked products, one-sided Jacobi SVD and PCA.

Matrices are plain 2-D ``numpy.ndarray`` of float64.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractViolation, NumericError

__all__ = [
    "matmul",
    "svd",
    "pca_fit_transform",
    "PCA",
    "write_matrix_csv",
    "read_matrix_csv",
]


def _as_matrix(m, name="m"):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _check_finite(m, name):
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    """Matrix product with a shape contract.

    Raises
    ------
    ContractViolation
        If ``a.shape[1] != b.shape[0]``.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"dimension mismatch: {a.shape} @ {b.shape}"
        )
    return _check_finite(a @ b, "matmul result")


def svd(m, tol=1e-14, max_sweeps=100):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Parameters
    ----------
    m : array-like, shape (rows, cols)
    tol : float
        Convergence threshold on the normalized column inner products.
    max_sweeps : int
        Iteration cap; exceeding it raises :class:`NumericError`.

    Returns
    -------
    U : ndarray, shape (rows, r)
    S : ndarray, shape (r,)
        Non-negative, non-increasing.
    Vt : ndarray, shape (r, cols)
        ``r = min(rows, cols)``.
    """
    m = _check_finite(_as_matrix(m), "svd input")
    rows, cols = m.shape
    transposed = rows < cols
    a = (m.T if transposed else m).copy()
    n_rows, n = a.shape
    v = np.eye(n)
    # inner products below this are rounding noise of the whole matrix
    floor = 1e-15 * float(np.sum(a * a))

    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if abs(gamma) <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break
    else:
        raise NumericError(
            f"Jacobi SVD did not converge after {max_sweeps} sweeps"
        )

    sing = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros((n_rows, n))
    scale = sing[0] if sing.size and sing[0] > 0 else 1.0
    keep = sing > scale * 1e-14
    u[:, keep] = a[:, keep] / sing[keep]
    if not np.all(keep):
        u = _complete_orthonormal(u, keep)

    if transposed:
        return v, sing, u.T
    return u, sing, v.T


def _complete_orthonormal(u, keep):
    # Fill columns belonging to (numerically) zero singular values with an
    # orthonormal complement so U keeps orthonormal columns.
    n_rows = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(keep)]
    out = u.copy()
    candidate = 0
    for j in np.flatnonzero(~keep):
        while True:
            e = np.zeros(n_rows)
            e[candidate % n_rows] = 1.0
            candidate += 1
            for b in basis:
                e -= (b @ e) * b
            for b in basis:
                e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                e /= norm
                break
            if candidate > 2 * n_rows:
                raise NumericError("could not complete orthonormal basis")
        basis.append(e)
        out[:, j] = e
    return out


def pca_fit_transform(m, out_dim):
    """Center ``m`` and project onto its top ``out_dim`` right singular vectors.

    Returns
    -------
    projected : ndarray, shape (rows, out_dim)
    components : ndarray, shape (out_dim, cols)
    mean : ndarray, shape (cols,)
    """
    m = _check_finite(_as_matrix(m), "pca input")
    rows, cols = m.shape
    if rows < 2:
        raise ContractViolation("PCA needs at least 2 rows")
    if not 1 <= out_dim <= min(rows, cols):
        raise ContractViolation(
            f"out_dim={out_dim} must be in [1, {min(rows, cols)}]"
        )
    mean = m.mean(axis=0)
    centered = m - mean
    _, _, vt = svd(centered)
    components = vt[:out_dim]
    # deterministic sign: largest-magnitude loading positive
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(out_dim), idx])
    signs[signs == 0] = 1.0
    components = components * signs[:, None]
    return centered @ components.T, components, mean


class PCA(BaseEstimator, TransformerMixin):
    """Centered (unscaled) PCA backed by the Jacobi SVD.

    Parameters
    ----------
    n_components : int

    Attributes
    ----------
    components_ : ndarray, shape (n_components, n_features)
    mean_ : ndarray, shape (n_features,)
    explained_variance_ : ndarray, shape (n_components,)
    explained_variance_ratio_ : ndarray, shape (n_components,)
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        projected, self.components_, self.mean_ = pca_fit_transform(
            X, self.n_components
        )
        total = ((X - self.mean_) ** 2).sum() / (X.shape[0] - 1)
        self.explained_variance_ = (projected ** 2).sum(axis=0) / (X.shape[0] - 1)
        self.explained_variance_ratio_ = (
            self.explained_variance_ / total if total > 0
            else np.zeros_like(self.explained_variance_)
        )
        self.n_features_in_ = X.shape[1]
        return projected

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractViolation(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        return (X - self.mean_) @ self.components_.T


def write_matrix_csv(path, m):
    """Write ``rows,cols`` on the first line, then the matrix row by row."""
    m = _as_matrix(m)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{m.shape[0]},{m.shape[1]}\n")
        for row in m:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_matrix_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            rows, cols = int(header[0]), int(header[1])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:1: bad matrix header") from exc
        data = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            vals = [float(x) for x in line.split(",")]
            if len(vals) != cols:
                raise ValueError(f"{path}:{lineno}: expected {cols} values")
            data.append(vals)
    if len(data) != rows:
        raise ValueError(f"{path}: expected {rows} rows, found {len(data)}")
    return np.array(data, dtype=np.float64).reshape(rows, cols)
