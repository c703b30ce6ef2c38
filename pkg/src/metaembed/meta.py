"""Dual meta-embedding autoencoder.

For every concept ``c`` and view ``i``:

* ``T_src = relu(E_src x_src)``, ``T_avg = relu(E_avg x_avg)`` where
  ``x_avg`` is the mean source embedding of the concept's top Dice
  neighbours in that view;
* ``m_i = D_i [T_src; T_avg]`` (a linear dense layer, width ``2 d'``);
* ``m = [m_1; ...; m_k]`` is the meta-embedding (``b = 2 k d'``);
* a shared decoder maps ``m`` back to all ``2 k`` inputs at once.

The objective, summed over concepts and views, is
``w1 |T_src - T_avg|^2 + w2 |dec_src - x_src|^2 + w3 |dec_avg - x_avg|^2``.

``dual=False`` gives the single-encoder ablation: the average branch, the
alignment term and the average reconstruction are dropped.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ContractViolation, TrainingError
from .nn import AdamState, Dense, Sequential, monotone_adam

logger = logging.getLogger(__name__)

VIEWS = ("dem", "lab", "notes")


@dataclass
class MetaInputs:
    """Per-view source rows and neighbour-average rows, all ``V x d'``."""

    views: tuple
    src: dict
    avg: dict
    vocab: object = None

    def __post_init__(self):
        shapes = {self.src[v].shape for v in self.views} | {self.avg[v].shape for v in self.views}
        if len(shapes) != 1:
            raise ContractViolation(f"input matrices disagree in shape: {sorted(shapes)}")

    @property
    def n_concepts(self):
        return self.src[self.views[0]].shape[0]

    @property
    def dim(self):
        return self.src[self.views[0]].shape[1]

    def restrict(self, views):
        views = tuple(views)
        return MetaInputs(views, {v: self.src[v] for v in views},
                          {v: self.avg[v] for v in views}, self.vocab)


def neighbor_average(source, neighbors):
    """Row ``c`` = mean of ``source`` rows listed in ``neighbors[c]``."""
    source = np.asarray(source, dtype=np.float64)
    out = np.zeros_like(source)
    for c, nbrs in enumerate(neighbors):
        idx = [j for j, _ in nbrs]
        if idx:
            out[c] = source[idx].mean(axis=0)
    return out


def build_meta_inputs(sources, graphs):
    """Pair each view's source embedding with its neighbour averages.

    ``sources`` and ``graphs`` are sequences (or view-keyed dicts) of
    :class:`~metaembed.gae.SourceEmbedding` and
    :class:`~metaembed.graph.ViewGraph`.
    """
    if isinstance(sources, dict):
        sources = list(sources.values())
    if isinstance(graphs, dict):
        graphs = list(graphs.values())
    by_view = {g.view: g for g in graphs}
    vocab = sources[0].vocab
    src, avg, views = {}, {}, []
    for s in sources:
        g = by_view.get(s.view)
        if g is None:
            raise ContractViolation(f"no graph for view {s.view!r}")
        if s.vocab is not None and vocab is not None and s.vocab != vocab:
            raise ContractViolation("vocabularies differ across views")
        if g.vocab is not None and vocab is not None and g.vocab != vocab:
            raise ContractViolation("graph vocabulary differs from source vocabulary")
        if s.matrix.shape[0] != g.n_nodes:
            raise ContractViolation("source rows do not match graph size")
        views.append(s.view)
        src[s.view] = np.asarray(s.matrix, dtype=np.float64)
        avg[s.view] = neighbor_average(s.matrix, g.dice_neighbors)
    return MetaInputs(tuple(views), src, avg, vocab)


class DualMEAEModel:
    """Parameters of the fusion network for a fixed view list."""

    def __init__(self, views, dim, dual=True, decoder_hidden=2,
                 omega=(1.0, 1.0, 1.0), rng=None, layers=None):
        self.views = tuple(views)
        self.dim = int(dim)
        self.dual = bool(dual)
        self.decoder_hidden = int(decoder_hidden)
        self.omega = tuple(float(w) for w in omega)
        if len(self.omega) != 3 or min(self.omega) < 0:
            raise ContractViolation("omega must be three non-negative weights")
        d = self.dim
        k = len(self.views)
        self.meta_dim = 2 * k * d
        self.n_outputs = (2 if self.dual else 1) * k
        if layers is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.enc_src = {v: Dense.glorot(d, d, "relu", rng) for v in self.views}
            self.enc_avg = ({v: Dense.glorot(d, d, "relu", rng) for v in self.views}
                            if self.dual else {})
            in_view = 2 * d if self.dual else d
            self.view_dense = {v: Dense.glorot(in_view, 2 * d, "identity", rng)
                               for v in self.views}
            dims = [self.meta_dim] + [d] * self.decoder_hidden + [self.n_outputs * d]
            acts = ["relu"] * self.decoder_hidden + ["identity"]
            self.decoder = Sequential.build(dims, acts, rng)
        else:
            self._assign_layers(list(layers))

    # layer bookkeeping -----------------------------------------------------

    def layers(self):
        out = []
        for v in self.views:
            out.append(self.enc_src[v])
            if self.dual:
                out.append(self.enc_avg[v])
            out.append(self.view_dense[v])
        out.extend(self.decoder.layers)
        return out

    def _assign_layers(self, layers):
        per_view = 3 if self.dual else 2
        expected = per_view * len(self.views) + self.decoder_hidden + 1
        if len(layers) != expected:
            raise ContractViolation(f"expected {expected} layers, got {len(layers)}")
        it = iter(layers)
        self.enc_src, self.enc_avg, self.view_dense = {}, {}, {}
        for v in self.views:
            self.enc_src[v] = next(it)
            if self.dual:
                self.enc_avg[v] = next(it)
            self.view_dense[v] = next(it)
        self.decoder = Sequential(list(it))

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers() for g in layer.grads()]

    def copy(self):
        layers = [Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers()]
        return DualMEAEModel(self.views, self.dim, self.dual, self.decoder_hidden,
                             self.omega, layers=layers)

    def output_rows(self):
        """Names of the decoder output rows, in order."""
        rows = []
        for v in self.views:
            rows.append(f"{v}_src")
            if self.dual:
                rows.append(f"{v}_avg")
        return rows

    def permuted(self, order):
        """Equivalent model with views reordered to ``order``.

        Decoder input columns and output rows are permuted to match, so
        ``m`` and the decoder output are block permutations of the original.
        """
        order = tuple(order)
        if sorted(order) != sorted(self.views):
            raise ContractViolation("order must be a permutation of the views")
        d = self.dim
        pos = [self.views.index(v) for v in order]
        in_cols = np.concatenate([np.arange(2 * d * p, 2 * d * (p + 1)) for p in pos])
        r = 2 if self.dual else 1
        out_rows = np.concatenate([np.arange(r * d * p, r * d * (p + 1)) for p in pos])
        new = self.copy()
        new.views = order
        new.enc_src = {v: new.enc_src[v] for v in order}
        new.enc_avg = {v: new.enc_avg[v] for v in order} if self.dual else {}
        new.view_dense = {v: new.view_dense[v] for v in order}
        first = new.decoder.layers[0]
        first.weight = first.weight[:, in_cols].copy()
        last = new.decoder.layers[-1]
        last.weight = last.weight[out_rows].copy()
        last.bias = last.bias[out_rows].copy()
        return new

    # forward / loss / backward ---------------------------------------------

    def forward(self, inputs, idx):
        """Forward pass for the concepts in ``idx`` (caches for backward)."""
        d = self.dim
        t_src, t_avg, blocks = {}, {}, []
        for v in self.views:
            t_src[v] = self.enc_src[v].forward(inputs.src[v][idx])
            if self.dual:
                t_avg[v] = self.enc_avg[v].forward(inputs.avg[v][idx])
                t = np.concatenate([t_src[v], t_avg[v]], axis=-1)
            else:
                t = t_src[v]
            blocks.append(self.view_dense[v].forward(t))
        m = np.concatenate(blocks, axis=-1)
        # view blocks summed in sorted order: reordering views is exact
        dec = self.decoder.layers[0].forward_blocks(m, len(self.views))
        for layer in self.decoder.layers[1:]:
            dec = layer.forward(dec)
        dec = dec.reshape(dec.shape[:-1] + (self.n_outputs, d))
        return {"idx": idx, "t_src": t_src, "t_avg": t_avg, "m": m, "dec": dec}

    def _targets(self, inputs, idx):
        rows = []
        for v in self.views:
            rows.append(inputs.src[v][idx])
            if self.dual:
                rows.append(inputs.avg[v][idx])
        return np.stack(rows, axis=-2)

    def loss_terms(self, inputs, out):
        """Weighted loss terms summed over the forward batch."""
        w1, w2, w3 = self.omega
        resid = out["dec"] - self._targets(inputs, out["idx"])
        r = 2 if self.dual else 1
        terms = {"align": 0.0, "src": 0.0, "avg": 0.0}
        for i, v in enumerate(self.views):
            terms["src"] += w2 * float(np.sum(resid[..., r * i, :] ** 2))
            if self.dual:
                diff = out["t_src"][v] - out["t_avg"][v]
                terms["align"] += w1 * float(np.sum(diff * diff))
                terms["avg"] += w3 * float(np.sum(resid[..., r * i + 1, :] ** 2))
        return terms

    def backward(self, inputs, out):
        """Gradients of the summed loss w.r.t. ``params()``, same order."""
        w1, w2, w3 = self.omega
        d = self.dim
        resid = out["dec"] - self._targets(inputs, out["idx"])
        weights = np.array(([w2, w3] if self.dual else [w2]) * len(self.views))
        g_dec = 2.0 * resid * weights[:, None]
        g_m = self.decoder.backward(g_dec.reshape(g_dec.shape[:-2] + (-1,)))
        for i, v in enumerate(self.views):
            g_t = self.view_dense[v].backward(g_m[..., 2 * d * i:2 * d * (i + 1)])
            if self.dual:
                diff = out["t_src"][v] - out["t_avg"][v]
                g_src = g_t[..., :d] + 2.0 * w1 * diff
                g_avg = g_t[..., d:] - 2.0 * w1 * diff
                self.enc_avg[v].backward(g_avg)
            else:
                g_src = g_t
            self.enc_src[v].backward(g_src)
        return self.grads()


def meta_forward(model, inputs, c):
    """Single-concept forward pass.

    Returns
    -------
    m : ndarray, shape (b,)
    dec_out : ndarray, shape (n_outputs, d')
        Rows ordered as :meth:`DualMEAEModel.output_rows`.
    t_src, t_avg : dict of view -> ndarray (d',)
    """
    if not 0 <= c < inputs.n_concepts:
        raise ContractViolation(f"concept index {c} out of range")
    out = model.forward(inputs, c)
    return out["m"], out["dec"], out["t_src"], out["t_avg"]


def loss_breakdown(model, inputs, idx=None):
    """Loss terms ``align``, ``src``, ``avg`` and their ``total``."""
    if idx is None:
        idx = np.arange(inputs.n_concepts)
    terms = model.loss_terms(inputs, model.forward(inputs, idx))
    terms["total"] = terms["align"] + terms["src"] + terms["avg"]
    return terms


def meta_loss(model, inputs, c=None):
    """Objective for concept ``c`` (or summed over all concepts if ``None``)."""
    if c is not None and not 0 <= c < inputs.n_concepts:
        raise ContractViolation(f"concept index {c} out of range")
    idx = np.arange(inputs.n_concepts) if c is None else np.array([c])
    return loss_breakdown(model, inputs, idx)["total"]


def meta_gradients(model, inputs, idx=None):
    if idx is None:
        idx = np.arange(inputs.n_concepts)
    out = model.forward(inputs, idx)
    return model.backward(inputs, out)


@dataclass
class MetaEmbeddings:
    matrix: np.ndarray
    vocab: object
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.matrix.shape[1]


class DualMEAE(BaseEstimator, TransformerMixin):
    """Fuse per-view source embeddings into meta-embeddings.

    Parameters
    ----------
    omega : tuple of 3 floats
        Weights of the alignment, source and average reconstruction terms.
    epochs : int
        Epoch cap.
    lr : float
        Adam learning rate.
    dual : bool
        ``False`` trains the single-encoder ablation.
    decoder_hidden : int
        Hidden decoder layers (each ``d'`` wide).
    tol, patience : float, int
        Stop once the relative loss improvement stays below ``tol`` for
        ``patience`` consecutive epochs.
    random_state : int

    Attributes
    ----------
    model_ : DualMEAEModel
    embedding_ : ndarray, shape (V, 2 * k * d')
    loss_curve_ : list of float
        Initial total loss, then the total after every accepted update.
    n_epochs_ : int
    """

    def __init__(self, omega=(1.0, 1.0, 1.0), epochs=500, lr=1e-3, dual=True,
                 decoder_hidden=2, tol=1e-5, patience=10, random_state=0):
        self.omega = omega
        self.epochs = epochs
        self.lr = lr
        self.dual = dual
        self.decoder_hidden = decoder_hidden
        self.tol = tol
        self.patience = patience
        self.random_state = random_state

    def fit(self, inputs, y=None):
        n = inputs.n_concepts
        if n < 2:
            raise ContractViolation("need at least 2 concepts")
        if min(self.omega) <= 0:
            raise ContractViolation("omega weights must be > 0")
        rng = np.random.default_rng(self.random_state)
        model = DualMEAEModel(inputs.views, inputs.dim, self.dual,
                              self.decoder_hidden, self.omega, rng=rng)
        params = model.params()
        state = AdamState.for_params(params, lr=self.lr)

        def loss_and_grads():
            # full batch; the concept order only fixes the summation order
            out = model.forward(inputs, rng.permutation(n))
            loss = sum(model.loss_terms(inputs, out).values())
            if not np.isfinite(loss):
                raise TrainingError(f"meta loss became {loss}; lower lr")
            return loss, model.backward(inputs, out)

        stall = [0]

        def converged(epoch, curve):
            prev, cur = curve[-2], curve[-1]
            rel = (prev - cur) / max(abs(prev), 1e-300)
            stall[0] = stall[0] + 1 if rel < self.tol else 0
            return stall[0] >= self.patience

        curve = monotone_adam(loss_and_grads, params, state, self.epochs,
                              on_epoch=converged)
        self.model_ = model
        self.loss_curve_ = curve
        self.n_epochs_ = len(curve)
        self.embedding_ = self.transform(inputs)
        logger.debug("DualMEAE views=%s dual=%s: loss %.5f -> %.5f in %d epochs",
                     inputs.views, self.dual, curve[0], curve[-1], len(curve))
        return self

    def transform(self, inputs):
        check_is_fitted(self, "model_")
        if tuple(inputs.views) != self.model_.views:
            raise ContractViolation(
                f"inputs have views {inputs.views}, model expects {self.model_.views}"
            )
        return self.model_.forward(inputs, np.arange(inputs.n_concepts))["m"].copy()

    def fit_transform(self, inputs, y=None):
        return self.fit(inputs).embedding_


def train_dual_meae(inputs, seed=0, **params):
    """Fit :class:`DualMEAE` and wrap its output as :class:`MetaEmbeddings`."""
    est = DualMEAE(random_state=seed, **params).fit(inputs)
    h = hashlib.sha256(repr(sorted(params.items())).encode()).hexdigest()[:16]
    return est.model_, MetaEmbeddings(est.embedding_, inputs.vocab, seed, h,
                                      {"loss_curve": est.loss_curve_})
