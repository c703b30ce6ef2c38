"""Per-view co-occurrence graphs with view-specific node features."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation

logger = logging.getLogger(__name__)

VIEWS = ("dem", "lab", "notes")
DICE_MODES = ("continuous", "binary")


@dataclass(frozen=True)
class ViewGraph:
    """Graph over the shared vocabulary for one view.

    ``adjacency`` is symmetric binary with a zero diagonal; self-loops only
    enter ``norm_adjacency = D^-1/2 (A + I) D^-1/2``. ``dice_neighbors[c]``
    lists ``(index, score)`` for the top concepts by Dice, best first.
    """

    view: str
    vocab: object
    adjacency: np.ndarray
    norm_adjacency: np.ndarray
    features: np.ndarray
    dice_neighbors: tuple
    support: np.ndarray
    dice_mode: str = "continuous"

    @property
    def n_nodes(self):
        return self.adjacency.shape[0]

    @property
    def n_edges(self):
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))


def visit_matrix(records, n_codes):
    """Binary visits x codes incidence matrix, visits in record order."""
    visits = [v for r in records for v in r.visits]
    B = np.zeros((len(visits), n_codes), dtype=np.float64)
    for i, v in enumerate(visits):
        B[i, list(v.codes)] = 1.0
    return B


def cooccurrence_counts(records, n_codes):
    B = visit_matrix(records, n_codes)
    C = B.T @ B
    np.fill_diagonal(C, 0.0)
    return C


def normalize_adjacency(adjacency):
    a_hat = adjacency + np.eye(adjacency.shape[0])
    d = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    out = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    return 0.5 * (out + out.T)


def _minmax_columns(X):
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    span[span == 0] = 1.0
    return (X - lo) / span


def dem_features(records, n_codes):
    """Mean age and sex/ethnicity proportions over patients having each code."""
    sexes = sorted({r.sex for r in records})
    eths = sorted({r.ethnicity for r in records})
    P = np.zeros((len(records), n_codes))
    attrs = np.zeros((len(records), 1 + len(sexes) + len(eths)))
    for i, r in enumerate(records):
        for v in r.visits:
            P[i, list(v.codes)] = 1.0
        attrs[i, 0] = r.age
        attrs[i, 1 + sexes.index(r.sex)] = 1.0
        attrs[i, 1 + len(sexes) + eths.index(r.ethnicity)] = 1.0
    counts = P.sum(axis=0)
    X = P.T @ attrs
    seen = counts > 0
    X[seen] /= counts[seen, None]
    X[seen] = _minmax_columns(X[seen]) if seen.sum() > 1 else X[seen]
    # every column min-max scaled over observed codes (age would dominate Dice)
    return X


def lab_features(records, n_codes):
    """Per lab test: mean, std and a presence flag over visits with each code."""
    labs = sorted({k for r in records for v in r.visits for k in v.labs})
    visits = [v for r in records for v in r.visits]
    B = visit_matrix(records, n_codes)
    vals = np.zeros((len(visits), len(labs)))
    mask = np.zeros((len(visits), len(labs)))
    col = {k: j for j, k in enumerate(labs)}
    for i, v in enumerate(visits):
        for k, x in v.labs.items():
            vals[i, col[k]] = x
            mask[i, col[k]] = 1.0
    n = B.T @ mask
    s1 = B.T @ vals
    s2 = B.T @ (vals * vals)
    present = n > 0
    mean = np.where(present, s1 / np.maximum(n, 1), 0.0)
    var = np.where(present, s2 / np.maximum(n, 1) - mean * mean, 0.0)
    std = np.sqrt(np.maximum(var, 0.0))
    seen = B.sum(axis=0) > 0
    if seen.sum() > 1:
        mean[seen] = _minmax_columns(mean[seen]) * present[seen]
        std[seen] = _minmax_columns(std[seen]) * present[seen]
    out = np.empty((n_codes, 3 * len(labs)))
    out[:, 0::3] = mean
    out[:, 1::3] = std
    out[:, 2::3] = present
    return out


def notes_features(records, n_codes):
    """TF-IDF of note tokens aggregated over the visits containing each code."""
    toks = sorted({k for r in records for v in r.visits for k in v.tokens})
    col = {k: j for j, k in enumerate(toks)}
    visits = [v for r in records for v in r.visits]
    B = visit_matrix(records, n_codes)
    T = np.zeros((len(visits), len(toks)))
    for i, v in enumerate(visits):
        for k, n in v.tokens.items():
            T[i, col[k]] = n
    counts = B.T @ T
    total = counts.sum(axis=1, keepdims=True)
    tf = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    n_docs = int((total[:, 0] > 0).sum())
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    return tf * idf


_FEATURES = {"dem": dem_features, "lab": lab_features, "notes": notes_features}


def dice_similarity(x, y):
    """Continuous Dice ``2 sum(min(x, y)) / (sum(x) + sum(y))``; ``0/0 -> 0``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"length mismatch {x.shape} vs {y.shape}")
    if (x < 0).any() or (y < 0).any():
        raise ContractViolation("dice_similarity requires non-negative entries")
    denom = x.sum() + y.sum()
    if denom == 0:
        return 0.0
    return float(2.0 * np.minimum(x, y).sum() / denom)


def _dice_row(values, c, mode):
    """Dice of concept ``c`` against every concept (``values``: features or support)."""
    x = values[c]
    if mode == "binary":
        inter = values @ x
        denom = values.sum(axis=1) + x.sum()
    else:
        inter = np.minimum(values, x[None, :]).sum(axis=1)
        denom = values.sum(axis=1) + x.sum()
    return np.divide(2.0 * inter, denom, out=np.zeros(len(values)), where=denom > 0)


def _neighbors_from_scores(scores, c, k):
    idx = np.arange(len(scores))
    keep = idx != c
    cand = idx[keep]
    # descending score, ascending index on ties
    order = np.lexsort((cand, -scores[keep]))
    chosen = cand[order[:k]]
    return [(int(j), float(scores[j])) for j in chosen]


def top_k_neighbors(graph, c, k=3):
    """The ``k`` highest-Dice concepts other than ``c`` (ties: lower index first)."""
    n = graph.n_nodes
    if n < 2:
        raise ContractViolation("need at least 2 concepts")
    if not 0 <= c < n:
        raise ContractViolation(f"concept index {c} out of range")
    values = graph.support if graph.dice_mode == "binary" else graph.features
    return _neighbors_from_scores(_dice_row(values, c, graph.dice_mode), c, k)


def build_graph(records, vocab, view, tau=1, dice_mode="continuous", k=3):
    """Co-occurrence graph over ``vocab`` with features for ``view``.

    An edge joins two codes appearing together in at least ``tau`` visits.
    """
    if view not in _FEATURES:
        raise ContractViolation(f"unknown view {view!r}")
    if dice_mode not in DICE_MODES:
        raise ContractViolation(f"unknown dice mode {dice_mode!r}")
    if not records:
        raise ContractViolation("no records")
    n = len(vocab)
    B = visit_matrix(records, n)
    C = B.T @ B
    np.fill_diagonal(C, 0.0)
    A = (C >= tau).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    X = _FEATURES[view](records, n)
    unseen = np.flatnonzero(B.sum(axis=0) == 0)
    if unseen.size:
        X[unseen] = 0.0
        warnings.warn(
            f"{unseen.size} vocabulary codes never observed; isolated with zero features",
            stacklevel=2,
        )
    support = B.T.copy()
    values = support if dice_mode == "binary" else X
    neighbors = tuple(
        tuple(_neighbors_from_scores(_dice_row(values, c, dice_mode), c, k))
        for c in range(n)
    ) if n >= 2 else ((),)
    return ViewGraph(
        view=view, vocab=vocab, adjacency=A, norm_adjacency=normalize_adjacency(A),
        features=X, dice_neighbors=neighbors, support=support, dice_mode=dice_mode,
    )


def export_graph(graph, edges_path, features_path):
    """Write ``src,dst`` edges (each once) and a ``code,f0..`` feature table."""
    codes = graph.vocab.codes
    with open(edges_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"])
        for u, v in zip(*np.nonzero(np.triu(graph.adjacency, 1))):
            w.writerow([codes[u], codes[v]])
    with open(features_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code"] + [f"f{j}" for j in range(graph.features.shape[1])])
        for code, row in zip(codes, graph.features):
            w.writerow([code] + [repr(float(x)) for x in row])
