"""Evaluation of concept embeddings.

Three quantitative tasks (semantic similarity, drug-disease relation
classification by vector offsets, outcome prediction) plus k-means
clustering with a 2-D PCA projection for inspection.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.metrics import silhouette_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ContractViolation
from .linalg import pca_fit_transform

logger = logging.getLogger(__name__)

RELATIONS = ("MAY-TREAT", "MAY-PREVENT")


class UndefinedCorrelation(ValueError):
    """Correlation requested for an input with zero rank variance."""


# -- metrics -----------------------------------------------------------------

def spearman_rho(a, b):
    """Pearson correlation of average-tie fractional ranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ContractViolation("need two equal-length sequences of length >= 2")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0:
        raise UndefinedCorrelation("constant input: rank correlation undefined")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise ContractViolation("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ContractViolation("labels must be 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ContractViolation("both classes must be present")
    return scores, labels


def auc_roc(scores, labels):
    """Normalized Mann-Whitney U (ties count one half)."""
    scores, labels = _binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels):
    """Average precision: sum over thresholds of ``(R_k - R_{k-1}) * P_k``."""
    scores, labels = _binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores is a threshold
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = tp[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / labels.sum()
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def accuracy(pred, labels):
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    return float(np.mean(pred == labels))


def cosine_similarity(x, y):
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 0.0
    return float(x @ y / (nx * ny))


def _row_normalize(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


# -- label sets --------------------------------------------------------------

@dataclass
class EvalLabelSet:
    """Ground truth for the three tasks, keyed by concept code."""

    similarity_pairs: list = field(default_factory=list)
    relations: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)
    target_code: str = ""

    def validate(self, vocab):
        for a, b, _ in self.similarity_pairs:
            vocab.lookup(a)
            vocab.lookup(b)
        for rel, drug, dis in self.relations:
            vocab.lookup(drug)
            vocab.lookup(dis)
        if self.relations:
            counts = {r: 0 for r in {t[0] for t in self.relations}}
            for t in self.relations:
                counts[t[0]] += 1
            if min(counts.values()) < 2:
                raise ContractViolation("need >= 2 tuples per relation class")
        if self.target_code:
            vocab.lookup(self.target_code)


def write_label_files(directory, labels):
    import os

    with open(os.path.join(directory, "similarity_pairs.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code_a", "code_b", "same_group"])
        w.writerows(labels.similarity_pairs)
    with open(os.path.join(directory, "relations.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rel", "drug", "disease"])
        w.writerows(labels.relations)
    with open(os.path.join(directory, "outcomes.csv"), "w", newline="",
              encoding="utf-8") as fh:
        fh.write(f"# target={labels.target_code}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "label"])
        w.writerows(sorted(labels.outcomes.items()))


def read_label_files(directory):
    import os

    labels = EvalLabelSet()
    path = os.path.join(directory, "similarity_pairs.csv")
    if os.path.exists(path):
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                labels.similarity_pairs.append(
                    (row["code_a"], row["code_b"], int(row["same_group"])))
    path = os.path.join(directory, "relations.csv")
    if os.path.exists(path):
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                labels.relations.append((row["rel"], row["drug"], row["disease"]))
    path = os.path.join(directory, "outcomes.csv")
    if os.path.exists(path):
        with open(path, newline="", encoding="utf-8") as fh:
            lines = []
            for line in fh:
                if line.startswith("# target="):
                    labels.target_code = line.strip().split("=", 1)[1]
                elif not line.startswith("#"):
                    lines.append(line)
        for row in csv.DictReader(lines):
            labels.outcomes[row["patient_id"]] = int(row["label"])
    return labels


@dataclass
class TaskReport:
    task: str
    metrics: dict
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"task": self.task, "metrics": self.metrics, "details": self.details}


# -- semantic similarity -----------------------------------------------------

def pair_cosines(embeddings, vocab, pairs):
    emb = np.asarray(embeddings, dtype=np.float64)
    cos = []
    n_zero = 0
    for a, b, _ in pairs:
        x = emb[vocab.lookup(a)]
        y = emb[vocab.lookup(b)]
        if not x.any() or not y.any():
            n_zero += 1
        cos.append(cosine_similarity(x, y))
    if n_zero:
        warnings.warn(f"{n_zero} pairs involve a zero embedding; cosine set to 0",
                      stacklevel=3)
    return np.array(cos)


def semantic_similarity_task(embeddings, vocab, pairs):
    """Spearman rho between pair cosines and 0/1 same-group ratings."""
    if len(pairs) < 2:
        raise ContractViolation("need at least 2 labelled pairs")
    cos = pair_cosines(embeddings, vocab, pairs)
    rating = np.array([float(s) for _, _, s in pairs])
    rho = spearman_rho(cos, rating)
    return TaskReport("sem", {"spearman_rho": rho}, {"n_pairs": len(pairs)})


# -- relation classification -------------------------------------------------

def relation_offsets(embeddings, vocab, tuples):
    emb = np.asarray(embeddings, dtype=np.float64)
    return np.array([emb[vocab.lookup(d)] - emb[vocab.lookup(s)] for _, d, s in tuples])


def relation_predictions(offsets, rels, top=2):
    """Top-``top`` hit flags and same-relation scores for each tuple.

    Every other tuple's offset is ranked by cosine to the test offset
    (descending, lower index first on ties); a hit means one of the first
    ``top`` shares the test relation. The score is the largest cosine to any
    other tuple with the same relation.
    """
    rels = np.asarray(rels)
    n = len(rels)
    unit = _row_normalize(np.asarray(offsets, dtype=np.float64))
    sims = unit @ unit.T
    hits = np.zeros(n, dtype=int)
    scores = np.zeros(n)
    idx = np.arange(n)
    for t in range(n):
        others = idx[idx != t]
        s = sims[t, others]
        order = np.lexsort((others, -s))
        best = others[order[:top]]
        hits[t] = int(np.any(rels[best] == rels[t]))
        same = others[rels[others] == rels[t]]
        scores[t] = sims[t, same].max() if same.size else -1.0
    return hits, scores


def relation_task(embeddings, vocab, tuples):
    """2-NN vector-offset relation classification.

    Accuracy is the top-2 hit rate. AUC-ROC / AUC-PR score how well the
    best same-relation cosine separates hits from misses; they are ``None``
    when every tuple is a hit (or none is).
    """
    if len(tuples) < 3:
        raise ContractViolation("need at least 3 relation tuples")
    offsets = relation_offsets(embeddings, vocab, tuples)
    rels = [t[0] for t in tuples]
    hits, scores = relation_predictions(offsets, rels)
    metrics = {"accuracy": float(hits.mean()), "auc_roc": None, "auc_pr": None}
    if 0 < hits.sum() < hits.size:
        metrics["auc_roc"] = auc_roc(scores, hits)
        metrics["auc_pr"] = auc_pr(scores, hits)
    else:
        warnings.warn("relation hits are single-class; AUC metrics undefined",
                      stacklevel=2)
    return TaskReport("rel", metrics, {"n_tuples": len(tuples),
                                       "hits": hits.tolist()})


def relation_null_accuracy(embeddings, vocab, tuples, n_perm=200, seed=0):
    """Mean top-2 accuracy with relation labels shuffled."""
    rng = np.random.default_rng(seed)
    offsets = relation_offsets(embeddings, vocab, tuples)
    rels = np.array([t[0] for t in tuples])
    accs = [relation_predictions(offsets, rng.permutation(rels))[0].mean()
            for _ in range(n_perm)]
    return float(np.mean(accs))


# -- outcome prediction ------------------------------------------------------

class LogisticRegressionGD(BaseEstimator, ClassifierMixin):
    """Binary logistic regression fitted by full-batch gradient descent.

    Features are standardized with training statistics. With validation
    data, the iterate with the lowest validation log-loss is kept and the
    decision threshold is tuned for validation accuracy.
    """

    def __init__(self, lr=0.1, max_iter=2000, l2=1e-4, patience=100):
        self.lr = lr
        self.max_iter = max_iter
        self.l2 = l2
        self.patience = patience

    @staticmethod
    def _loss(p, y):
        p = np.clip(p, 1e-12, 1 - 1e-12)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.float64)
        self.classes_ = np.array([0, 1])
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Xs = (X - self.mean_) / self.scale_
        n, f = Xs.shape
        w = np.zeros(f)
        b = 0.0
        best = (np.inf, w.copy(), b)
        since = 0
        use_val = X_val is not None and len(X_val)
        if use_val:
            Xv = (np.asarray(X_val, dtype=np.float64) - self.mean_) / self.scale_
            yv = np.asarray(y_val, dtype=np.float64)
        for it in range(self.max_iter):
            p = _sigmoid(Xs @ w + b)
            g = p - y
            w -= self.lr * (Xs.T @ g / n + self.l2 * w)
            b -= self.lr * g.mean()
            if use_val:
                val = self._loss(_sigmoid(Xv @ w + b), yv)
                if val < best[0] - 1e-12:
                    best = (val, w.copy(), b)
                    since = 0
                else:
                    since += 1
                    if since >= self.patience:
                        break
        if use_val:
            _, w, b = best
        self.coef_ = w
        self.intercept_ = b
        self.n_iter_ = it + 1
        self.threshold_ = 0.5
        if use_val:
            self.threshold_ = _best_threshold(self.predict_proba(X_val)[:, 1], yv)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(int)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _best_threshold(p, y):
    cands = np.unique(np.r_[0.5, p])
    accs = [np.mean((p >= t) == y) for t in cands]
    # prefer the candidate closest to 0.5 among ties
    best = max(range(len(cands)), key=lambda i: (accs[i], -abs(cands[i] - 0.5)))
    return float(cands[best])


def split_sizes(n):
    n_train = int(round(0.75 * n))
    n_val = int(round(0.125 * n))
    return n_train, n_val, n - n_train - n_val


def balanced_split(positives, negatives, seed=0):
    """Balance classes and split each 75/12.5/12.5.

    The larger class is subsampled (seeded) to the size of the smaller.

    Returns
    -------
    dict with ``train``, ``val``, ``test`` lists of ``(id, label)``.
    """
    rng = np.random.default_rng(seed)
    positives = sorted(positives)
    negatives = sorted(negatives)
    if not positives:
        raise ContractViolation("no positive instances")
    if not negatives:
        raise ContractViolation("no negative instances")
    n = min(len(positives), len(negatives))
    pos = [positives[i] for i in rng.permutation(len(positives))[:n]]
    neg = [negatives[i] for i in rng.permutation(len(negatives))[:n]]
    n_train, n_val, _ = split_sizes(n)
    out = {"train": [], "val": [], "test": []}
    for ids, label in ((pos, 1), (neg, 0)):
        out["train"] += [(i, label) for i in ids[:n_train]]
        out["val"] += [(i, label) for i in ids[n_train:n_train + n_val]]
        out["test"] += [(i, label) for i in ids[n_train + n_val:]]
    return out


def patient_representation(embeddings, visits, exclude=()):
    """Mean over visits of the mean concept embedding of each visit."""
    emb = np.asarray(embeddings, dtype=np.float64)
    vecs = []
    for v in visits:
        idx = sorted(c for c in v.codes if c not in exclude)
        if idx:
            vecs.append(emb[idx].mean(axis=0))
    if not vecs:
        return np.zeros(emb.shape[1])
    return np.mean(vecs, axis=0)


def outcome_instances(vocab, records, outcomes, target_code):
    """Eligible ``(positives, negatives)`` patient ids for the outcome task."""
    target = vocab.lookup(target_code)
    by_id = {r.patient_id: r for r in records}
    pos, neg = [], []
    for pid, lab in outcomes.items():
        rec = by_id.get(pid)
        if rec is None or len(rec.visits) < 2:
            continue
        if lab == 1:
            pos.append(pid)
        elif not any(target in v.codes for v in rec.visits):
            neg.append(pid)
    return pos, neg


def outcome_split(vocab, records, outcomes, target_code, seed=0):
    """The balanced train/val/test split ``outcome_task`` uses."""
    pos, neg = outcome_instances(vocab, records, outcomes, target_code)
    return balanced_split(pos, neg, seed)


def outcome_task(embeddings, vocab, records, outcomes, target_code, seed=0,
                 classifier=None):
    """Predict the target code in a patient's final visit from earlier visits.

    Eligible patients have at least two visits. Positives carry label 1;
    negatives carry label 0 and never show the target code. Classes are
    balanced and split 75/12.5/12.5; the classifier is fitted on the
    training part, tuned on validation and scored on test.
    """
    target = vocab.lookup(target_code)
    by_id = {r.patient_id: r for r in records}
    split = outcome_split(vocab, records, outcomes, target_code, seed)

    def design(part):
        X = np.array([patient_representation(embeddings, by_id[pid].visits[:-1],
                                             exclude={target})
                      for pid, _ in split[part]])
        y = np.array([lab for _, lab in split[part]])
        return X, y

    X_tr, y_tr = design("train")
    X_va, y_va = design("val")
    X_te, y_te = design("test")
    clf = classifier if classifier is not None else LogisticRegressionGD()
    clf.fit(X_tr, y_tr, X_va, y_va)
    p = clf.predict_proba(X_te)[:, 1]
    metrics = {
        "auc_roc": auc_roc(p, y_te),
        "auc_pr": auc_pr(p, y_te),
        "accuracy": accuracy(clf.predict(X_te), y_te),
    }
    details = {k: len(v) for k, v in split.items()}
    return TaskReport("hf", metrics, details)


# -- clustering --------------------------------------------------------------

class KMeans(BaseEstimator, ClusterMixin):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``.
    """

    def __init__(self, n_clusters=8, max_iter=300, tol=1e-8, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _seed(self, X, rng):
        n = X.shape[0]
        centers = [X[rng.integers(n)]]
        d2 = ((X - centers[0]) ** 2).sum(axis=1)
        for _ in range(1, self.n_clusters):
            total = d2.sum()
            if total > 0:
                i = rng.choice(n, p=d2 / total)
            else:
                i = rng.integers(n)
            centers.append(X[i])
            d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
        return np.array(centers)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.n_clusters < 2:
            raise ContractViolation("n_clusters must be >= 2")
        if self.n_clusters >= X.shape[0]:
            raise ContractViolation("n_clusters must be smaller than the sample count")
        rng = np.random.default_rng(self.random_state)
        centers = self._seed(X, rng)
        for it in range(self.max_iter):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            labels = np.argmin(d2, axis=1)
            new = centers.copy()
            for j in range(self.n_clusters):
                members = X[labels == j]
                if len(members):
                    new[j] = members.mean(axis=0)
                else:
                    # re-seed an empty cluster at the worst-fit point
                    far = int(np.argmax(d2[np.arange(len(X)), labels]))
                    new[j] = X[far]
            shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
            centers = new
            if shift < self.tol:
                break
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        self.labels_ = np.argmin(d2, axis=1)
        self.cluster_centers_ = centers
        self.inertia_ = float(d2[np.arange(len(X)), self.labels_].sum())
        self.n_iter_ = it + 1
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def silhouette(X, labels):
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2 or len(np.unique(labels)) >= len(labels):
        return 0.0
    return float(silhouette_score(X, labels))


def cluster_and_project(embeddings, k, seed=0):
    """K-means labels, 2-D PCA coordinates and the silhouette score."""
    X = np.asarray(embeddings, dtype=np.float64)
    if k >= X.shape[0]:
        raise ContractViolation("k must be smaller than the number of concepts")
    km = KMeans(n_clusters=k, random_state=seed).fit(X)
    coords, _, _ = pca_fit_transform(X, min(2, X.shape[1]))
    return {"labels": km.labels_, "coords": coords,
            "silhouette": silhouette(X, km.labels_)}


def write_projection(path, vocab, result):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code", "x", "y", "cluster"])
        coords = result["coords"]
        for code, xy, lab in zip(vocab.codes, coords, result["labels"]):
            y = xy[1] if len(xy) > 1 else 0.0
            w.writerow([code, repr(float(xy[0])), repr(float(y)), int(lab)])
