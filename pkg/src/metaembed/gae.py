"""Graph autoencoder producing per-view source embeddings.

Encoder: two graph-convolution layers ``Z = Â relu(Â X W0) W1``.
Decoder: ``sigmoid(Z Zᵀ)`` scored against ``A + I`` with class-balanced
binary cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractViolation, TrainingError
from .linalg import pca_fit_transform
from .nn import AdamState, monotone_adam, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SourceEmbedding:
    """PCA-reduced view embedding, one row per vocabulary code."""

    view: str
    matrix: np.ndarray
    vocab: object

    @property
    def dim(self):
        return self.matrix.shape[1]


def propagate(norm_adjacency, m):
    """``Â @ m`` with each neighbourhood summed in sorted order.

    Summing the terms of every row in a canonical (value-sorted) order makes
    the result independent of node numbering, so relabelling nodes permutes
    the output rows bit for bit.
    """
    out = np.empty((norm_adjacency.shape[0], m.shape[1]))
    for i, row in enumerate(norm_adjacency):
        nbrs = np.flatnonzero(row)
        terms = row[nbrs, None] * m[nbrs]
        out[i] = np.sort(terms, axis=0).sum(axis=0)
    return out


def _dense(h, w):
    # per-element sums in a fixed k order, independent of the row position
    return (h[:, :, None] * w[None, :, :]).sum(axis=1)


def gae_forward(w0, w1, norm_adjacency, features):
    """Two-layer graph-convolution encoder; returns ``Z`` (V x d)."""
    a = np.asarray(norm_adjacency, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    if a.shape[0] != a.shape[1] or a.shape[0] != x.shape[0]:
        raise ContractViolation(f"adjacency {a.shape} vs features {x.shape}")
    if w0.shape[0] != x.shape[1] or w1.shape[0] != w0.shape[1]:
        raise ContractViolation(
            f"weights {w0.shape}, {w1.shape} do not fit features {x.shape}"
        )
    h = np.maximum(_dense(propagate(a, x), w0), 0.0)
    return _dense(propagate(a, h), w1)


def _targets_and_weights(adjacency):
    t = adjacency + np.eye(adjacency.shape[0])
    t = (t > 0).astype(np.float64)
    n_pos = t.sum()
    n_neg = t.size - n_pos
    if n_neg == 0:
        w = np.full_like(t, 1.0 / n_pos)
    else:
        w = np.where(t > 0, 0.5 / n_pos, 0.5 / n_neg)
    return t, w


def gae_loss_and_grads(w0, w1, norm_adjacency, features, adjacency):
    """Balanced BCE reconstruction loss and gradients for ``(w0, w1)``."""
    a = norm_adjacency
    ax = a @ features
    pre = ax @ w0
    h = np.maximum(pre, 0.0)
    m = a @ h
    z = m @ w1
    s = z @ z.T
    t, w = _targets_and_weights(adjacency)
    # softplus(s) - t*s, computed stably
    loss = float(np.sum(w * (np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))) - t * s)))
    ds = w * (sigmoid(s) - t)
    dz = (ds + ds.T) @ z
    dw1 = m.T @ dz
    dh = a.T @ (dz @ w1.T)
    dpre = dh * (pre > 0)
    dw0 = ax.T @ dpre
    return loss, [dw0, dw1], z


class GraphAutoencoder(BaseEstimator, TransformerMixin):
    """Full-graph GAE trained with Adam.

    Parameters
    ----------
    hidden_dim : int
    embed_dim : int
    epochs : int
    lr : float
    random_state : int

    Attributes
    ----------
    w0_, w1_ : ndarray
        Encoder weights, shapes ``(f, hidden_dim)`` and ``(hidden_dim, embed_dim)``.
    embedding_ : ndarray, shape (V, embed_dim)
    loss_curve_ : list of float
        Initial loss followed by the loss after every accepted epoch.
    """

    def __init__(self, hidden_dim=64, embed_dim=32, epochs=200, lr=0.01,
                 random_state=0):
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def _init_weights(self, n_features):
        rng = np.random.default_rng(self.random_state)
        lim0 = np.sqrt(6.0 / (n_features + self.hidden_dim))
        lim1 = np.sqrt(6.0 / (self.hidden_dim + self.embed_dim))
        w0 = rng.uniform(-lim0, lim0, (n_features, self.hidden_dim))
        w1 = rng.uniform(-lim1, lim1, (self.hidden_dim, self.embed_dim))
        return w0, w1

    def fit(self, graph, y=None):
        adjacency = graph.adjacency
        n = adjacency.shape[0]
        if n < 2:
            raise ContractViolation("GAE needs at least 2 nodes")
        if not np.any(adjacency):
            raise ContractViolation("GAE needs at least one edge")
        features = graph.features
        w0, w1 = self._init_weights(features.shape[1])
        params = [w0, w1]
        state = AdamState.for_params(params, lr=self.lr)

        def loss_and_grads():
            loss, grads, _ = gae_loss_and_grads(w0, w1, graph.norm_adjacency,
                                                features, adjacency)
            return loss, grads

        curve = monotone_adam(loss_and_grads, params, state, self.epochs)
        if not np.isfinite(curve[-1]):
            raise TrainingError(
                f"GAE loss became {curve[-1]}; try a lower lr"
            )
        z = gae_forward(w0, w1, graph.norm_adjacency, features)
        self.w0_, self.w1_ = w0, w1
        self.embedding_ = z
        self.loss_curve_ = curve
        self.n_features_in_ = features.shape[1]
        logger.debug("GAE %s: loss %.5f -> %.5f", graph.view, curve[0], curve[-1])
        return self

    def transform(self, graph):
        check_is_fitted(self, "w0_")
        return gae_forward(self.w0_, self.w1_, graph.norm_adjacency, graph.features)

    def fit_transform(self, graph, y=None):
        return self.fit(graph).embedding_


def gae_train(graph, hidden_dim=64, embed_dim=32, epochs=200, lr=0.01, seed=0):
    """Train a GAE on ``graph``; returns the fitted model and its ``Z``."""
    model = GraphAutoencoder(hidden_dim, embed_dim, epochs, lr, seed).fit(graph)
    return model, model.embedding_


def project_sources(z, out_dim, view="", vocab=None):
    """PCA-reduce ``z`` (V x d) to ``out_dim < d`` columns."""
    z = np.asarray(z, dtype=np.float64)
    if out_dim >= z.shape[1]:
        raise ContractViolation(f"out_dim={out_dim} must be < d={z.shape[1]}")
    projected, _, _ = pca_fit_transform(z, out_dim)
    return SourceEmbedding(view, projected, vocab)
