"""EHR-like record model, file ingestion and a synthetic generator.

Two on-disk layouts are supported:

* ``csv-triple``: ``patients.csv``, ``visits.csv`` and ``events.csv`` in one
  directory (events carry ``kind`` in ``{code, lab, token}``).
* ``jsonl``: ``records.jsonl``, one patient object per line.

Either layout may be accompanied by ``vocabulary.csv`` (``code,kind``) which
fixes the vocabulary order and can list codes never observed in a visit.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ParseError

logger = logging.getLogger(__name__)

KINDS = ("diagnosis", "medication", "procedure")
RELATIONS = ("MAY-TREAT", "MAY-PREVENT")
DEFAULT_MAX_CODES = 39
_PREFIX_KIND = {"D": "diagnosis", "M": "medication", "P": "procedure"}


class ConceptVocabulary:
    """Ordered, duplicate-free list of concept codes shared by every view."""

    def __init__(self, codes, kinds=None):
        codes = [str(c) for c in codes]
        if len(set(codes)) != len(codes):
            dup = [c for c, n in Counter(codes).items() if n > 1]
            raise ValueError(f"duplicate codes in vocabulary: {dup[:5]}")
        if kinds is None:
            kinds = [_PREFIX_KIND.get(c[:1], "diagnosis") for c in codes]
        kinds = list(kinds)
        if len(kinds) != len(codes) or any(k not in KINDS for k in kinds):
            raise ValueError("kinds must name one of diagnosis/medication/procedure per code")
        self.codes = tuple(codes)
        self.kinds = tuple(kinds)
        self.index = {c: i for i, c in enumerate(self.codes)}

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)

    def __contains__(self, code):
        return code in self.index

    def __eq__(self, other):
        return (isinstance(other, ConceptVocabulary)
                and self.codes == other.codes and self.kinds == other.kinds)

    def __repr__(self):
        return f"ConceptVocabulary(size={len(self)})"

    def lookup(self, code):
        try:
            return self.index[code]
        except KeyError:
            raise KeyError(f"code {code!r} not in vocabulary") from None

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256("\n".join(self.codes).encode()).hexdigest()
        return h[:16]


@dataclass(frozen=True)
class Visit:
    visit_id: str
    codes: frozenset
    labs: dict = field(default_factory=dict)
    tokens: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: float
    sex: str
    ethnicity: str
    visits: tuple


@dataclass
class GroundTruth:
    """Planted structure of a synthetic dataset.

    ``clusters`` maps code -> cluster id, ``relations`` holds
    ``(rel, drug_code, disease_code)`` tuples, ``outcomes`` maps
    patient id -> 0/1 for ``outcome_code`` appearing in the final visit.
    """

    clusters: dict
    relations: list
    outcomes: dict
    outcome_code: str
    similarity_pairs: list = field(default_factory=list)
    view_groups: dict = field(default_factory=dict)


def validate_records(records, vocab, max_codes=DEFAULT_MAX_CODES):
    for rec in records:
        if not rec.visits:
            raise ValueError(f"patient {rec.patient_id}: no visits")
        for v in rec.visits:
            if not v.codes:
                raise ValueError(f"visit {v.visit_id}: no codes")
            if max_codes is not None and len(v.codes) > max_codes:
                raise ValueError(
                    f"visit {v.visit_id}: {len(v.codes)} codes exceeds max {max_codes}"
                )
            for c in v.codes:
                if not 0 <= c < len(vocab):
                    raise ValueError(f"visit {v.visit_id}: code index {c} out of range")
            for key, val in v.labs.items():
                if not np.isfinite(val):
                    raise ValueError(f"visit {v.visit_id}: lab {key} not finite")


# -- reading -----------------------------------------------------------------

def _read_vocabulary(directory):
    path = os.path.join(directory, "vocabulary.csv")
    if not os.path.exists(path):
        return None
    codes, kinds = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            if not row.get("code"):
                raise ParseError(f"{path}:{lineno}: missing code")
            codes.append(row["code"])
            kinds.append(row.get("kind") or _PREFIX_KIND.get(row["code"][:1], "diagnosis"))
    return ConceptVocabulary(codes, kinds)


def _finish(raw_patients, directory, max_codes):
    vocab = _read_vocabulary(directory)
    if vocab is None:
        seen = sorted({c for p in raw_patients for v in p["visits"] for c in v["codes"]})
        vocab = ConceptVocabulary(seen)
    records = []
    for p in raw_patients:
        visits = []
        for v in p["visits"]:
            if not v["codes"]:
                raise ValueError(f"visit {v['visit_id']}: no codes")
            try:
                idx = frozenset(vocab.lookup(c) for c in v["codes"])
            except KeyError as exc:
                raise ValueError(f"visit {v['visit_id']}: {exc.args[0]}") from None
            visits.append(Visit(v["visit_id"], idx, dict(v["labs"]), dict(v["tokens"])))
        records.append(PatientRecord(p["patient_id"], float(p["age"]), p["sex"],
                                     p["ethnicity"], tuple(visits)))
    validate_records(records, vocab, max_codes)
    return records, vocab


def _load_csv_triple(directory, max_codes):
    patients = {}
    order = []
    path = os.path.join(directory, "patients.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            pid, age, sex, eth = row
            try:
                age = float(age)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad age {age!r}") from None
            patients[pid] = {"patient_id": pid, "age": age, "sex": sex,
                             "ethnicity": eth, "visits": []}
            order.append(pid)

    visits = {}
    path = os.path.join(directory, "visits.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            vid, pid, seq = row
            if pid not in patients:
                raise ParseError(f"{path}:{lineno}: unknown patient {pid!r}")
            try:
                seq = int(seq)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad seq_no {seq!r}") from None
            visits[vid] = {"visit_id": vid, "seq": seq, "codes": set(),
                           "labs": {}, "tokens": {}}
            patients[pid]["visits"].append(visits[vid])

    path = os.path.join(directory, "events.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            vid, kind, key, value = row
            if vid not in visits:
                raise ParseError(f"{path}:{lineno}: unknown visit {vid!r}")
            v = visits[vid]
            try:
                if kind == "code":
                    v["codes"].add(key)
                elif kind == "lab":
                    v["labs"][key] = float(value)
                elif kind == "token":
                    v["tokens"][key] = v["tokens"].get(key, 0) + int(value)
                else:
                    raise ParseError(f"{path}:{lineno}: unknown event kind {kind!r}")
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad value {value!r}") from None

    raw = []
    for pid in order:
        p = patients[pid]
        p["visits"].sort(key=lambda v: v["seq"])
        if not p["visits"]:
            raise ValueError(f"patient {pid}: no visits")
        raw.append(p)
    return _finish(raw, directory, max_codes)


def _load_jsonl(path, max_codes):
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                p = {"patient_id": str(obj["patient_id"]), "age": float(obj["age"]),
                     "sex": obj["sex"], "ethnicity": obj["ethnicity"], "visits": []}
                for v in obj["visits"]:
                    p["visits"].append({
                        "visit_id": str(v["visit_id"]),
                        "codes": set(v["codes"]),
                        "labs": {k: float(x) for k, x in v.get("labs", {}).items()},
                        "tokens": {k: int(x) for k, x in v.get("tokens", {}).items()},
                    })
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not p["visits"]:
                raise ValueError(f"patient {p['patient_id']}: no visits")
            raw.append(p)
    return _finish(raw, os.path.dirname(path) or ".", max_codes)


def load_records(path, format="csv-triple", max_codes=DEFAULT_MAX_CODES):
    """Read patient records and build the shared vocabulary.

    Parameters
    ----------
    path : str
        Directory for ``csv-triple``; directory or ``.jsonl`` file for ``jsonl``.
    format : {"csv-triple", "jsonl"}
    max_codes : int or None
        Upper bound on distinct codes per visit.

    Returns
    -------
    records : list of PatientRecord
    vocab : ConceptVocabulary
    """
    if format == "csv-triple":
        return _load_csv_triple(path, max_codes)
    if format == "jsonl":
        if os.path.isdir(path):
            path = os.path.join(path, "records.jsonl")
        return _load_jsonl(path, max_codes)
    raise ValueError(f"unknown format {format!r}")


# -- writing -----------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_vocabulary(directory, vocab):
    with open(os.path.join(directory, "vocabulary.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["code", "kind"])
        w.writerows(zip(vocab.codes, vocab.kinds))


def write_records(directory, records, vocab, format="csv-triple"):
    os.makedirs(directory, exist_ok=True)
    write_vocabulary(directory, vocab)
    if format == "jsonl":
        with open(os.path.join(directory, "records.jsonl"), "w", encoding="utf-8") as fh:
            for rec in records:
                obj = {
                    "patient_id": rec.patient_id, "age": rec.age, "sex": rec.sex,
                    "ethnicity": rec.ethnicity,
                    "visits": [{
                        "visit_id": v.visit_id,
                        "codes": sorted(vocab.codes[c] for c in v.codes),
                        "labs": dict(sorted(v.labs.items())),
                        "tokens": dict(sorted(v.tokens.items())),
                    } for v in rec.visits],
                }
                fh.write(json.dumps(obj, sort_keys=True) + "\n")
        return
    if format != "csv-triple":
        raise ValueError(f"unknown format {format!r}")
    with open(os.path.join(directory, "patients.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "age", "sex", "ethnicity"])
        for rec in records:
            w.writerow([rec.patient_id, _fmt(rec.age), rec.sex, rec.ethnicity])
    with open(os.path.join(directory, "visits.csv"), "w", newline="",
              encoding="utf-8") as fv, \
            open(os.path.join(directory, "events.csv"), "w", newline="",
                 encoding="utf-8") as fe:
        wv = csv.writer(fv, lineterminator="\n")
        we = csv.writer(fe, lineterminator="\n")
        wv.writerow(["visit_id", "patient_id", "seq_no"])
        we.writerow(["visit_id", "kind", "key", "value"])
        for rec in records:
            for seq, v in enumerate(rec.visits):
                wv.writerow([v.visit_id, rec.patient_id, seq])
                for c in sorted(v.codes):
                    we.writerow([v.visit_id, "code", vocab.codes[c], 1])
                for k, val in sorted(v.labs.items()):
                    we.writerow([v.visit_id, "lab", k, _fmt(val)])
                for k, n in sorted(v.tokens.items()):
                    we.writerow([v.visit_id, "token", k, n])


def write_ground_truth(path, truth):
    obj = {
        "clusters": dict(sorted(truth.clusters.items())),
        "relations": [list(r) for r in truth.relations],
        "outcomes": dict(sorted(truth.outcomes.items())),
        "outcome_code": truth.outcome_code,
        "similarity_pairs": [list(p) for p in truth.similarity_pairs],
        "view_groups": truth.view_groups,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_ground_truth(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return GroundTruth(
        clusters={k: int(v) for k, v in obj["clusters"].items()},
        relations=[tuple(r) for r in obj["relations"]],
        outcomes={k: int(v) for k, v in obj["outcomes"].items()},
        outcome_code=obj.get("outcome_code", ""),
        similarity_pairs=[(a, b, int(s)) for a, b, s in obj.get("similarity_pairs", [])],
        view_groups=obj.get("view_groups", {}),
    )


# -- synthetic generator -----------------------------------------------------

@dataclass
class SyntheticConfig:
    """Knobs for :func:`generate_synthetic`.

    Defaults are a tenfold scale-down of a MIMIC-III cohort summary
    (7,499 patients, 2.66 visits/patient, 4,893 codes, 13.1 codes/visit).

    ``view_signal="partial"`` makes each view see only one digit (base
    ``partial_base``) of the cluster id, so no single view identifies a
    cluster on its own.
    """

    n_patients: int = 750
    mean_visits: float = 2.66
    min_visits: int = 2
    n_codes: int = 490
    mean_codes_per_visit: float = 13.1
    max_codes_per_visit: int = DEFAULT_MAX_CODES
    n_clusters: int = 10
    p_in: float = 0.4
    p_out: float = 0.02
    patient_focus: float = 0.8
    kind_fractions: tuple = (0.6, 0.25, 0.15)
    view_signal: str = "full"
    partial_base: int = 2
    n_labs: int = 10
    lab_presence: float = 0.7
    lab_effect: float = 1.5
    lab_noise: float = 0.5
    n_tokens: int = 200
    tokens_per_code: int = 4
    token_noise: float = 0.3
    dem_effect: float = 1.0
    n_relation_pairs: int = 8
    relation_rate: float = 0.6
    motif_codes: int = 2
    outcome_strength: float = 6.0
    outcome_rate: float = 0.3
    n_similarity_pairs: int = 500

    def validate(self):
        if self.n_clusters < 2:
            raise ConfigError("need at least 2 clusters")
        reserved = 1 + 2 * self.n_relation_pairs + 2 * self.motif_codes
        free = self.n_codes - reserved
        if free < 2 * self.n_clusters:
            raise ConfigError(
                f"{self.n_codes} codes cannot host {self.n_clusters} clusters "
                f"of >= 2 codes after {reserved} reserved codes"
            )
        if not (0 <= self.p_out and 0 < self.p_in):
            raise ConfigError("p_in must be > 0 and p_out >= 0")
        if self.view_signal not in ("full", "partial"):
            raise ConfigError("view_signal must be 'full' or 'partial'")
        if self.view_signal == "partial" and self.partial_base ** 3 < self.n_clusters:
            raise ConfigError("partial_base**3 must be >= n_clusters")
        if self.min_visits < 1 or self.mean_visits < self.min_visits:
            raise ConfigError("mean_visits must be >= min_visits >= 1")
        if not 1 <= self.mean_codes_per_visit <= self.max_codes_per_visit:
            raise ConfigError("mean_codes_per_visit must lie in [1, max_codes_per_visit]")
        n_med = int(round(self.kind_fractions[1] * self.n_codes))
        if n_med < 2 * self.n_relation_pairs + 1:
            raise ConfigError("too few medication codes for relation pairs")


SEXES = ("F", "M")
ETHNICITIES = ("white", "black", "hispanic", "asian")
VIEWS = ("dem", "lab", "notes")


def _view_groups(cfg):
    """Cluster -> group index seen by each view."""
    k = np.arange(cfg.n_clusters)
    if cfg.view_signal == "full":
        return {v: k.copy() for v in VIEWS}
    b = cfg.partial_base
    return {v: (k // b ** i) % b for i, v in enumerate(VIEWS)}


def _build_vocab(cfg):
    n_diag = int(round(cfg.kind_fractions[0] * cfg.n_codes)) - 1
    n_med = int(round(cfg.kind_fractions[1] * cfg.n_codes))
    n_proc = cfg.n_codes - 1 - n_diag - n_med
    codes = [f"D{i:04d}" for i in range(n_diag)] + ["D_HF"]
    codes += [f"M{i:04d}" for i in range(n_med)]
    codes += [f"P{i:04d}" for i in range(n_proc)]
    kinds = ["diagnosis"] * (n_diag + 1) + ["medication"] * n_med + ["procedure"] * n_proc
    return ConceptVocabulary(codes, kinds), n_diag, n_med, n_proc


def generate_synthetic(config=None, seed=0):
    """Generate patients with planted clusters, relations and an outcome.

    Each visit has a focal cluster (usually the patient's own); codes are
    drawn without replacement with weight ``p_in`` inside the focal cluster
    and ``p_out`` elsewhere. Demographics, labs and note tokens depend on the
    clusters of the codes involved. Relation drugs are dedicated medication
    codes that join visits of their disease together with class-specific
    motif codes, tokens and lab shifts. The outcome code is added to a
    patient's final visit with a logistic probability in earlier cluster
    exposure.

    Returns
    -------
    records : list of PatientRecord
    vocab : ConceptVocabulary
    truth : GroundTruth
    """
    cfg = config or SyntheticConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    vocab, n_diag, n_med, n_proc = _build_vocab(cfg)
    V = len(vocab)
    hf = vocab.lookup("D_HF")

    med_start = n_diag + 1
    proc_start = med_start + n_med
    rel_drugs = {}
    drug_pool = list(range(proc_start - 2 * cfg.n_relation_pairs, proc_start))
    motif = {}
    motif_pool = list(range(V - 2 * cfg.motif_codes, V))
    for r_i, rel in enumerate(RELATIONS):
        rel_drugs[rel] = drug_pool[r_i * cfg.n_relation_pairs:(r_i + 1) * cfg.n_relation_pairs]
        motif[rel] = motif_pool[r_i * cfg.motif_codes:(r_i + 1) * cfg.motif_codes]
    reserved = {hf, *drug_pool, *motif_pool}
    regular = np.array([i for i in range(V) if i not in reserved])

    cluster_of = np.full(V, -1)
    perm = rng.permutation(regular)
    for j, c in enumerate(perm):
        cluster_of[c] = j % cfg.n_clusters
    members = [np.sort(regular[cluster_of[regular] == k]) for k in range(cfg.n_clusters)]

    groups = _view_groups(cfg)
    n_grp = {v: int(groups[v].max()) + 1 for v in VIEWS}

    # per-group signatures
    age_eff = rng.normal(0.0, 12.0, n_grp["dem"]) * cfg.dem_effect
    sex_eff = rng.normal(0.0, 1.5, n_grp["dem"]) * cfg.dem_effect
    eth_eff = rng.normal(0.0, 1.5, (n_grp["dem"], len(ETHNICITIES))) * cfg.dem_effect
    lab_base = rng.uniform(4.0, 8.0, cfg.n_labs)
    lab_eff = rng.normal(0.0, cfg.lab_effect, (n_grp["lab"], cfg.n_labs))
    n_motif_tok = max(2, cfg.n_tokens // 20)
    n_group_tok = cfg.n_tokens - 2 * n_motif_tok
    tok_blocks = np.array_split(np.arange(n_group_tok), n_grp["notes"])
    tok_dists = []
    for block in tok_blocks:
        w = rng.dirichlet(np.full(len(block), 2.0))
        tok_dists.append((block, w))
    motif_tokens = {rel: np.arange(n_group_tok + i * n_motif_tok,
                                   n_group_tok + (i + 1) * n_motif_tok)
                    for i, rel in enumerate(RELATIONS)}
    motif_lab = {rel: rng.normal(0.0, cfg.lab_effect, cfg.n_labs) for rel in RELATIONS}

    # relation tuples: distinct diseases drawn from regular diagnosis codes
    diag_regular = np.array([c for c in regular if c < n_diag])
    diseases = rng.choice(diag_regular, size=2 * cfg.n_relation_pairs, replace=False)
    relations = []
    drug_for_disease = {}
    for r_i, rel in enumerate(RELATIONS):
        for j, drug in enumerate(rel_drugs[rel]):
            dis = int(diseases[r_i * cfg.n_relation_pairs + j])
            relations.append((rel, drug, dis))
            drug_for_disease[dis] = (rel, drug)

    outcome_w = rng.normal(0.0, 1.0, cfg.n_clusters)
    outcome_w -= outcome_w.mean()

    def draw_codes(focal):
        n = 1 + rng.poisson(cfg.mean_codes_per_visit - 1)
        n = int(min(max(n, 1), cfg.max_codes_per_visit, len(regular)))
        w = np.where(cluster_of[regular] == focal, cfg.p_in, cfg.p_out)
        if w.sum() <= 0:
            w = np.ones(len(regular))
        w = w / w.sum()
        nz = int(np.count_nonzero(w))
        picked = rng.choice(regular, size=min(n, nz), replace=False, p=w)
        return set(int(c) for c in picked)

    raw_patients = []
    for p in range(cfg.n_patients):
        home = int(rng.integers(cfg.n_clusters))
        n_vis = cfg.min_visits + rng.poisson(cfg.mean_visits - cfg.min_visits)
        visits = []
        for _ in range(n_vis):
            focal = home if rng.random() < cfg.patient_focus else int(rng.integers(cfg.n_clusters))
            codes = draw_codes(focal)
            rel_hits = []
            for dis in sorted(codes):
                if dis in drug_for_disease and rng.random() < cfg.relation_rate:
                    rel, drug = drug_for_disease[dis]
                    codes.add(drug)
                    rel_hits.append(rel)
                    for m in motif[rel]:
                        if rng.random() < 0.8:
                            codes.add(m)
            codes = _cap(codes, cfg.max_codes_per_visit, rng, keep=reserved)
            visits.append((codes, rel_hits))
        raw_patients.append(visits)

    # outcome in the final visit
    outcomes = {}
    logits = []
    exposures = []
    for visits in raw_patients:
        earlier = [c for codes, _ in visits[:-1] for c in codes if cluster_of[c] >= 0]
        expo = np.bincount(cluster_of[earlier], minlength=cfg.n_clusters) / max(len(earlier), 1)
        exposures.append(expo)
        logits.append(cfg.outcome_strength * (expo @ outcome_w))
    logits = np.array(logits)
    # shift so the expected positive rate matches outcome_rate
    lo, hi = -20.0, 20.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(logits + mid)))) < cfg.outcome_rate:
            lo = mid
        else:
            hi = mid
    probs = 1.0 / (1.0 + np.exp(-(logits + 0.5 * (lo + hi))))

    records = []
    vcount = 0
    for p, visits in enumerate(raw_patients):
        pid = f"P{p:05d}"
        positive = rng.random() < probs[p]
        if positive:
            last_codes, last_rel = visits[-1]
            last_codes = set(last_codes)
            last_codes.add(hf)
            visits[-1] = (_cap(last_codes, cfg.max_codes_per_visit, rng, keep=reserved), last_rel)
        outcomes[pid] = int(positive)

        all_codes = [c for codes, _ in visits for c in codes if cluster_of[c] >= 0]
        dem_grp = groups["dem"][cluster_of[all_codes]] if all_codes else np.zeros(0, int)
        if len(dem_grp):
            age = 55.0 + age_eff[dem_grp].mean() + rng.normal(0.0, 5.0)
            sex_logit = sex_eff[dem_grp].mean()
            eth_logit = eth_eff[dem_grp].mean(axis=0)
        else:
            age, sex_logit, eth_logit = 55.0 + rng.normal(0.0, 5.0), 0.0, np.zeros(len(ETHNICITIES))
        age = float(np.clip(age, 18.0, 95.0))
        sex = SEXES[int(rng.random() < 1.0 / (1.0 + np.exp(-sex_logit)))]
        eth_p = np.exp(eth_logit - eth_logit.max())
        eth = ETHNICITIES[int(rng.choice(len(ETHNICITIES), p=eth_p / eth_p.sum()))]

        vis_objs = []
        for codes, rel_hits in visits:
            vid = f"V{vcount:06d}"
            vcount += 1
            clustered = [c for c in sorted(codes) if cluster_of[c] >= 0]
            labs = {}
            lab_shift = np.zeros(cfg.n_labs)
            if clustered:
                lab_shift += lab_eff[groups["lab"][cluster_of[clustered]]].mean(axis=0)
            for rel in rel_hits:
                lab_shift += motif_lab[rel] / max(len(clustered), 1) * 3.0
            present = rng.random(cfg.n_labs) < cfg.lab_presence
            noise = rng.normal(0.0, cfg.lab_noise, cfg.n_labs)
            for l in np.flatnonzero(present):
                labs[f"LAB{l:02d}"] = float(lab_base[l] + lab_shift[l] + noise[l])
            tokens = Counter()
            for c in clustered:
                block, w = tok_dists[groups["notes"][cluster_of[c]]]
                n_sig = rng.binomial(cfg.tokens_per_code, 1.0 - cfg.token_noise)
                tokens.update(int(t) for t in rng.choice(block, size=n_sig, p=w))
                tokens.update(int(t) for t in rng.integers(0, cfg.n_tokens,
                                                           cfg.tokens_per_code - n_sig))
            for rel in rel_hits:
                tokens.update(int(t) for t in rng.choice(motif_tokens[rel], size=cfg.tokens_per_code))
            tok = {f"T{t:04d}": int(n) for t, n in sorted(tokens.items())}
            vis_objs.append(Visit(vid, frozenset(codes), labs, tok))
        records.append(PatientRecord(pid, age, sex, eth, tuple(vis_objs)))

    clusters = {vocab.codes[c]: int(cluster_of[c]) for c in range(V) if cluster_of[c] >= 0}
    pairs = _similarity_pairs(members, vocab, cfg.n_similarity_pairs, rng)
    truth = GroundTruth(
        clusters=clusters,
        relations=[(rel, vocab.codes[d], vocab.codes[s]) for rel, d, s in relations],
        outcomes=outcomes,
        outcome_code="D_HF",
        similarity_pairs=pairs,
        view_groups={v: [int(g) for g in groups[v]] for v in VIEWS},
    )
    validate_records(records, vocab, cfg.max_codes_per_visit)
    return records, vocab, truth


def _cap(codes, limit, rng, keep):
    if len(codes) <= limit:
        return codes
    kept = sorted(c for c in codes if c in keep)
    rest = sorted(c for c in codes if c not in keep)
    n_rest = max(limit - len(kept), 0)
    chosen = rng.choice(rest, size=n_rest, replace=False) if n_rest else []
    return set(kept) | set(int(c) for c in chosen)


def _similarity_pairs(members, vocab, n_pairs, rng):
    # half same-cluster, half cross-cluster, no repeats
    k = len(members)
    seen = set()
    pairs = []
    n_same = n_pairs // 2
    attempts = 0
    while len(pairs) < n_pairs and attempts < 50 * n_pairs:
        attempts += 1
        same = len(pairs) < n_same
        if same:
            ci = int(rng.integers(k))
            if len(members[ci]) < 2:
                continue
            a, b = rng.choice(members[ci], size=2, replace=False)
        else:
            ci, cj = rng.choice(k, size=2, replace=False)
            a = rng.choice(members[ci])
            b = rng.choice(members[cj])
        a, b = sorted((int(a), int(b)))
        if (a, b) in seen:
            continue
        seen.add((a, b))
        pairs.append((vocab.codes[a], vocab.codes[b], int(same)))
    return pairs


def generator_stats(records):
    n_vis = [len(r.visits) for r in records]
    n_codes = [len(v.codes) for r in records for v in r.visits]
    return {
        "patients": len(records),
        "visits": int(sum(n_vis)),
        "mean_visits_per_patient": float(np.mean(n_vis)),
        "mean_codes_per_visit": float(np.mean(n_codes)),
        "max_codes_per_visit": int(max(n_codes)),
    }
