"""Simple ensemble baselines: concatenation, averaging, SVD and one-hot."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ContractViolation
from .linalg import svd

METHODS = ("CONC", "AVG", "SVD", "HOT")


@dataclass(frozen=True)
class FusedEmbedding:
    method: str
    matrix: np.ndarray
    vocab: object

    @property
    def dim(self):
        return self.matrix.shape[1]


def l2_normalize_rows(m):
    """Unit-norm rows; all-zero rows stay zero."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _matrices(sources):
    mats = [np.asarray(getattr(s, "matrix", s), dtype=np.float64) for s in sources]
    if not mats:
        raise ContractViolation("no sources")
    if len({m.shape[0] for m in mats}) != 1:
        raise ContractViolation("sources cover different vocabularies")
    vocabs = [getattr(s, "vocab", None) for s in sources]
    vocabs = [v for v in vocabs if v is not None]
    if any(v != vocabs[0] for v in vocabs[1:]):
        raise ContractViolation("sources use different vocabularies")
    return mats, (vocabs[0] if vocabs else None)


def fuse_conc(sources):
    mats, vocab = _matrices(sources)
    return FusedEmbedding("CONC", np.hstack([l2_normalize_rows(m) for m in mats]), vocab)


def fuse_avg(sources):
    mats, vocab = _matrices(sources)
    if len({m.shape[1] for m in mats}) != 1:
        raise ContractViolation("AVG needs sources of equal dimension")
    return FusedEmbedding("AVG", np.mean([l2_normalize_rows(m) for m in mats], axis=0), vocab)


def fuse_svd(sources, d_svd=None):
    """First ``d_svd`` left singular vectors of the CONC matrix."""
    conc = fuse_conc(sources)
    c = conc.matrix
    if d_svd is None:
        d_svd = np.asarray(getattr(sources[0], "matrix", sources[0])).shape[1]
    if not 1 <= d_svd <= min(c.shape):
        raise ContractViolation(f"d_svd={d_svd} must be in [1, {min(c.shape)}]")
    u, _, _ = svd(c)
    return FusedEmbedding("SVD", u[:, :d_svd], conc.vocab)


def fuse_hot(vocab):
    n = vocab if isinstance(vocab, int) else len(vocab)
    return FusedEmbedding("HOT", np.eye(n), None if isinstance(vocab, int) else vocab)


class BaselineFusion(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit_transform(list_of_source_matrices)``.

    Parameters
    ----------
    method : {"CONC", "AVG", "SVD", "HOT"}
    d_svd : int or None
        Output width for ``SVD``; defaults to the source dimension.
    """

    def __init__(self, method="CONC", d_svd=None):
        self.method = method
        self.d_svd = d_svd

    def fit(self, X, y=None):
        method = self.method.upper()
        if method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}")
        self.method_ = method
        return self

    def transform(self, X):
        if self.method_ == "CONC":
            return fuse_conc(X).matrix
        if self.method_ == "AVG":
            return fuse_avg(X).matrix
        if self.method_ == "SVD":
            return fuse_svd(X, self.d_svd).matrix
        n = np.asarray(getattr(X[0], "matrix", X[0])).shape[0]
        return fuse_hot(n).matrix
