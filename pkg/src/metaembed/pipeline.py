"""Artifact-producing pipeline steps behind the command line.

Layout under the output directory::

    manifest.json               config hash, vocabulary hash, seed
    data/                       patient records and vocabulary.csv
    labels/                     similarity_pairs.csv, relations.csv, outcomes.csv
    views/embeddings_<view>.csv source embeddings (+ graph exports)
    meta/meta_embeddings.csv    fused embeddings and meta_model.dmea
    fused/fused_<method>.csv    baseline embeddings
    reports/                    evaluation reports

Every embedding CSV starts with ``# config_hash=... vocab_hash=...`` and
downstream steps refuse files whose hashes disagree with the run.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import os
import warnings

import numpy as np

from . import data as ehr
from .baselines import METHODS, fuse_avg, fuse_conc, fuse_hot, fuse_svd
from .evaluation import (
    EvalLabelSet,
    UndefinedCorrelation,
    cluster_and_project,
    outcome_task,
    read_label_files,
    relation_task,
    semantic_similarity_task,
    write_label_files,
    write_projection,
)
from .exceptions import ContractViolation, MissingArtifactError, ParseError
from .gae import SourceEmbedding, gae_train, project_sources
from .graph import VIEWS, build_graph, export_graph
from .meta import DualMEAE, build_meta_inputs
from .nn import save_checkpoint

logger = logging.getLogger(__name__)

TASKS = ("sem", "rel", "hf")
ROWS = ("M2M", "M2M_d", "M2M_l", "M2M_n", "M2M_s", "CONC", "AVG", "SVD", "HOT")
META_VARIANTS = {
    "M2M": (VIEWS, True),
    "M2M_d": (("dem",), True),
    "M2M_l": (("lab",), True),
    "M2M_n": (("notes",), True),
    "M2M_s": (VIEWS, False),
}


# -- embedding files ---------------------------------------------------------

def write_embedding_csv(path, matrix, vocab, config_hash, tag=""):
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash} vocab_hash={vocab.fingerprint()}"
                 f" tag={tag}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code"] + [f"dim{j}" for j in range(matrix.shape[1])])
        for code, row in zip(vocab.codes, matrix):
            w.writerow([code] + [repr(float(x)) for x in row])


def read_embedding_csv(path, vocab=None):
    """Parse an embedding CSV.

    Returns
    -------
    matrix : ndarray, rows in vocabulary order
    meta : dict with ``config_hash``, ``vocab_hash`` and ``tag``
    """
    if not os.path.exists(path):
        raise MissingArtifactError(f"embedding file not found: {path}")
    meta = {}
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for item in first[1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
            header = next(csv.reader([fh.readline()]))
        else:
            header = next(csv.reader([first]))
        if not header or header[0] != "code":
            raise ParseError(f"{path}: header must start with 'code'")
        dim = len(header) - 1
        rows = {}
        for lineno, row in enumerate(csv.reader(fh), start=3):
            if len(row) != dim + 1:
                raise ParseError(f"{path}:{lineno}: expected {dim + 1} fields")
            try:
                rows[row[0]] = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    codes = list(rows)
    if vocab is None:
        vocab = ehr.ConceptVocabulary(codes)
    if set(codes) != set(vocab.codes) or len(codes) != len(vocab):
        raise ParseError(f"{path}: codes do not match the vocabulary")
    matrix = np.array([rows[c] for c in vocab.codes], dtype=np.float64).reshape(len(vocab), dim)
    return matrix, meta


# -- pipeline ----------------------------------------------------------------

class Pipeline:
    """Runs the pipeline steps for one config into one output directory."""

    def __init__(self, config, out_dir):
        self.config = config
        self.out = out_dir
        self.config_hash = config.config_hash()
        self._graph_cache = {}

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def _makedirs(self, *parts):
        os.makedirs(self.path(*parts), exist_ok=True)

    # ---- generate
    def generate(self):
        """Write records, vocabulary, label files and the manifest."""
        cfg = self.config
        self._makedirs("data")
        self._makedirs("labels")
        if cfg.data.path:
            records, vocab = ehr.load_records(cfg.data.path, cfg.data.format)
            labels = read_label_files(cfg.data.path)
        else:
            records, vocab, truth = ehr.generate_synthetic(cfg.data.synthetic, cfg.seed)
            labels = EvalLabelSet(list(truth.similarity_pairs), list(truth.relations),
                                  dict(truth.outcomes), truth.outcome_code)
            ehr.write_ground_truth(self.path("labels", "ground_truth.json"), truth)
        labels.validate(vocab)
        ehr.write_records(self.path("data"), records, vocab, "csv-triple")
        write_label_files(self.path("labels"), labels)
        manifest = {
            "config_hash": self.config_hash,
            "vocab_hash": vocab.fingerprint(),
            "seed": cfg.seed,
            "n_patients": len(records),
            "n_codes": len(vocab),
        }
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        logger.info("generated %d patients, %d codes", len(records), len(vocab))
        return records, vocab, labels

    def _manifest(self):
        path = self.path("manifest.json")
        if not os.path.exists(path):
            raise MissingArtifactError(
                f"{path} missing; run the 'generate' command first")
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("config_hash") != self.config_hash:
            raise ContractViolation(
                f"{self.out} was generated with config {manifest.get('config_hash')}, "
                f"this run uses {self.config_hash}; rerun 'generate'")
        return manifest

    def load_data(self):
        manifest = self._manifest()
        records, vocab = ehr.load_records(self.path("data"), "csv-triple")
        if vocab.fingerprint() != manifest["vocab_hash"]:
            raise ContractViolation("data directory does not match its manifest")
        return records, vocab

    def load_labels(self):
        self._manifest()
        return read_label_files(self.path("labels"))

    def graphs(self, records, vocab):
        key = vocab.fingerprint()
        if key not in self._graph_cache:
            g = self.config.graph
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self._graph_cache[key] = {
                    v: build_graph(records, vocab, v, g.tau, g.dice_mode, g.neighbors)
                    for v in VIEWS}
        return self._graph_cache[key]

    # ---- train-views
    def train_views(self):
        records, vocab = self.load_data()
        graphs = self.graphs(records, vocab)
        g = self.config.gae
        self._makedirs("views")
        sources = {}
        for view in VIEWS:
            model, z = gae_train(graphs[view], g.hidden_dim, g.embed_dim, g.epochs,
                                 g.lr, self.config.seed)
            src = project_sources(z, g.proj_dim, view, vocab)
            sources[view] = src
            write_embedding_csv(self.path("views", f"embeddings_{view}.csv"),
                                src.matrix, vocab, self.config_hash, view)
            export_graph(graphs[view], self.path("views", f"graph_{view}_edges.csv"),
                         self.path("views", f"graph_{view}_features.csv"))
            logger.info("GAE %s: loss %.4f -> %.4f", view, model.loss_curve_[0],
                        model.loss_curve_[-1])
        return sources

    def _check_hashes(self, meta, vocab, path):
        if meta.get("config_hash") != self.config_hash:
            raise ContractViolation(
                f"{path}: config hash {meta.get('config_hash')} != {self.config_hash}")
        if meta.get("vocab_hash") != vocab.fingerprint():
            raise ContractViolation(f"{path}: vocabulary hash mismatch")

    def load_sources(self, vocab):
        sources = {}
        for view in VIEWS:
            path = self.path("views", f"embeddings_{view}.csv")
            if not os.path.exists(path):
                raise MissingArtifactError(
                    f"{path} missing; run the 'train-views' command first")
            matrix, meta = read_embedding_csv(path, vocab)
            self._check_hashes(meta, vocab, path)
            sources[view] = SourceEmbedding(view, matrix, vocab)
        return sources

    # ---- train-meta
    def meta_variant(self, name, records=None, vocab=None, sources=None):
        """Train one fusion variant; returns the fitted estimator."""
        if records is None:
            records, vocab = self.load_data()
        if sources is None:
            sources = self.load_sources(vocab)
        views, dual = META_VARIANTS[name]
        graphs = self.graphs(records, vocab)
        inputs = build_meta_inputs([sources[v] for v in views], [graphs[v] for v in views])
        m = self.config.meta
        est = DualMEAE(omega=m.omega, epochs=m.epochs, lr=m.lr, dual=dual,
                       decoder_hidden=m.decoder_hidden, tol=m.tol, patience=m.patience,
                       random_state=self.config.seed)
        est.fit(inputs)
        logger.info("%s: loss %.4f -> %.4f after %d epochs", name, est.loss_curve_[0],
                    est.loss_curve_[-1], est.n_epochs_ - 1)
        return est

    def train_meta(self, name="M2M"):
        records, vocab = self.load_data()
        est = self.meta_variant(name, records, vocab)
        self._makedirs("meta")
        stem = "meta_embeddings" if name == "M2M" else f"meta_embeddings_{name}"
        path = self.path("meta", f"{stem}.csv")
        write_embedding_csv(path, est.embedding_, vocab, self.config_hash, name)
        if name == "M2M":
            save_checkpoint(self.path("meta", "meta_model.dmea"), est.model_.layers())
            with open(self.path("meta", "meta_loss.csv"), "w", encoding="utf-8") as fh:
                fh.write("epoch,loss\n")
                for i, loss in enumerate(est.loss_curve_):
                    fh.write(f"{i},{loss!r}\n")
        return path, est

    # ---- fuse
    def fuse(self, method):
        method = method.upper()
        if method not in METHODS:
            raise ContractViolation(f"unknown fusion method {method!r}")
        _, vocab = self.load_data()
        if method == "HOT":
            fused = fuse_hot(vocab)
        else:
            sources = [self.load_sources(vocab)[v] for v in VIEWS]
            if method == "CONC":
                fused = fuse_conc(sources)
            elif method == "AVG":
                fused = fuse_avg(sources)
            else:
                fused = fuse_svd(sources, self.config.d_svd)
        self._makedirs("fused")
        path = self.path("fused", f"fused_{method.lower()}.csv")
        write_embedding_csv(path, fused.matrix, vocab, self.config_hash, method)
        return path

    # ---- evaluate
    def evaluate_matrix(self, matrix, vocab, tasks, method, records=None, labels=None):
        """Run ``tasks`` on ``matrix``; failed tasks are reported with an error."""
        if labels is None:
            labels = self.load_labels()
        if records is None and "hf" in tasks:
            records, _ = self.load_data()
        reports = []
        for task in tasks:
            entry = {"task": task, "method": method, "seed": self.config.seed,
                     "config_hash": self.config_hash}
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    if task == "sem":
                        rep = semantic_similarity_task(matrix, vocab, labels.similarity_pairs)
                    elif task == "rel":
                        rep = relation_task(matrix, vocab, labels.relations)
                    elif task == "hf":
                        rep = outcome_task(matrix, vocab, records, labels.outcomes,
                                           labels.target_code, seed=self.config.seed)
                    else:
                        raise ContractViolation(f"unknown task {task!r}")
                entry["metrics"] = rep.metrics
                entry["details"] = rep.details
            except (UndefinedCorrelation, ContractViolation) as exc:
                entry["metrics"] = None
                entry["error"] = str(exc)
            reports.append(entry)
        return reports

    def evaluate(self, embeddings_path, tasks=TASKS):
        records, vocab = self.load_data()
        matrix, meta = read_embedding_csv(embeddings_path, vocab)
        self._check_hashes(meta, vocab, embeddings_path)
        method = meta.get("tag") or os.path.splitext(os.path.basename(embeddings_path))[0]
        reports = self.evaluate_matrix(matrix, vocab, tasks, method, records)
        self._makedirs("reports")
        stem = os.path.splitext(os.path.basename(embeddings_path))[0]
        out = {"config_hash": self.config_hash, "vocab_hash": vocab.fingerprint(),
               "seed": self.config.seed, "method": method, "reports": reports,
               "timestamp": _timestamp()}
        path = self.path("reports", f"report_{stem}.json")
        _dump_json(path, out)
        return path, out

    # ---- run-all
    def run_all(self, tasks=TASKS):
        """Every step, every comparison row; writes a JSON report and a table."""
        records, vocab, labels = self.generate()
        self.train_views()
        sources = self.load_sources(vocab)
        matrices = {}
        for name in META_VARIANTS:
            if name == "M2M":
                path, est = self.train_meta("M2M")
            else:
                est = self.meta_variant(name, records, vocab, sources)
            matrices[name] = est.embedding_
        for method in METHODS:
            matrices[method], _ = read_embedding_csv(self.fuse(method), vocab)
        rows = []
        for name in ROWS:
            rows.append({"method": name, "dim": int(matrices[name].shape[1]),
                         "reports": self.evaluate_matrix(matrices[name], vocab, tasks,
                                                         name, records, labels)})
        proj = cluster_and_project(matrices["M2M"], self.config.eval.n_clusters,
                                   self.config.seed)
        write_projection(self.path("projection.csv"), vocab, proj)
        report = {
            "config_hash": self.config_hash,
            "vocab_hash": vocab.fingerprint(),
            "seed": self.config.seed,
            "rows": rows,
            "m2m_silhouette": proj["silhouette"],
            "timestamp": _timestamp(),
        }
        json_path = self.path("run_all_report.json")
        _dump_json(json_path, report)
        with open(self.path("run_all_table.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_table(rows))
        return json_path, report


def _timestamp():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_table(rows):
    """Plain-text comparison table, one line per method."""
    cols = [("hf", "auc_roc"), ("hf", "auc_pr"), ("hf", "accuracy"),
            ("rel", "auc_roc"), ("rel", "auc_pr"), ("rel", "accuracy"),
            ("sem", "spearman_rho")]
    head = ["method"] + [f"{t}.{m}" for t, m in cols]
    lines = ["  ".join(f"{h:>14}" for h in head)]
    for row in rows:
        by_task = {r["task"]: r.get("metrics") or {} for r in row["reports"]}
        cells = [row["method"]]
        for t, m in cols:
            v = by_task.get(t, {}).get(m)
            cells.append("n/a" if v is None else f"{v:.3f}")
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines) + "\n"
