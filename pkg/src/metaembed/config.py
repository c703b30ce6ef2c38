"""Pipeline configuration: nested dataclasses loaded from a TOML file.

Every hyperparameter the pipeline uses lives here with its default, so a
config file plus a seed fully determines every artifact.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .data import SyntheticConfig
from .exceptions import ConfigError
from .graph import DICE_MODES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataParams:
    """Either a synthetic cohort or records on disk (``path``)."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    path: str = ""
    format: str = "csv-triple"


@dataclass
class GraphParams:
    # tau=1 connects most code pairs on the default cohort; 4 keeps clusters visible
    tau: int = 4
    dice_mode: str = "continuous"
    neighbors: int = 3


@dataclass
class GaeParams:
    hidden_dim: int = 64
    embed_dim: int = 32
    proj_dim: int = 16
    epochs: int = 200
    lr: float = 0.01


@dataclass
class MetaParams:
    omega: tuple = (1.0, 1.0, 1.0)
    epochs: int = 500
    lr: float = 1e-3
    decoder_hidden: int = 2
    tol: float = 1e-5
    patience: int = 10


@dataclass
class EvalParams:
    n_clusters: int = 10
    d_svd: int = 0  # 0 means "same as proj_dim"


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataParams = field(default_factory=DataParams)
    graph: GraphParams = field(default_factory=GraphParams)
    gae: GaeParams = field(default_factory=GaeParams)
    meta: MetaParams = field(default_factory=MetaParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        if self.graph.tau < 1:
            raise ConfigError("graph.tau must be >= 1")
        if self.graph.dice_mode not in DICE_MODES:
            raise ConfigError(f"graph.dice_mode must be one of {DICE_MODES}")
        g = self.gae
        if not 0 < g.proj_dim < g.embed_dim:
            raise ConfigError("need 0 < gae.proj_dim < gae.embed_dim")
        if g.hidden_dim < 1 or g.epochs < 1 or g.lr <= 0:
            raise ConfigError("gae.hidden_dim, gae.epochs and gae.lr must be positive")
        m = self.meta
        if len(m.omega) != 3 or min(m.omega) <= 0:
            raise ConfigError("meta.omega must be three positive weights")
        if m.epochs < 1 or m.lr <= 0 or m.decoder_hidden < 0:
            raise ConfigError("meta.epochs, meta.lr must be positive")
        if self.eval.n_clusters < 2:
            raise ConfigError("eval.n_clusters must be >= 2")
        if self.data.format not in ("csv-triple", "jsonl"):
            raise ConfigError("data.format must be csv-triple or jsonl")
        if not self.data.path:
            self.data.synthetic.validate()
        return self

    @property
    def d_svd(self):
        return self.eval.d_svd or self.gae.proj_dim

    def to_dict(self):
        return asdict(self)

    def with_seed(self, seed):
        return replace(self, seed=int(seed)).validate()

    def config_hash(self):
        """Hash of everything that shapes trained artifacts (eval params excluded)."""
        d = self.to_dict()
        d.pop("eval")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        cfg = cls()
        if "seed" in raw:
            cfg.seed = raw.pop("seed")
        data = dict(raw.pop("data", {}))
        synth = data.pop("synthetic", {})
        cfg.data = _fill(DataParams, data, "data")
        cfg.data.synthetic = _fill(SyntheticConfig, synth, "data.synthetic")
        cfg.graph = _fill(GraphParams, raw.pop("graph", {}), "graph")
        cfg.gae = _fill(GaeParams, raw.pop("gae", {}), "gae")
        cfg.meta = _fill(MetaParams, raw.pop("meta", {}), "meta")
        cfg.eval = _fill(EvalParams, raw.pop("eval", {}), "eval")
        if raw:
            raise ConfigError(f"unknown config keys: {sorted(raw)}")
        cfg.meta.omega = tuple(float(w) for w in cfg.meta.omega)
        cfg.data.synthetic.kind_fractions = tuple(cfg.data.synthetic.kind_fractions)
        return cfg.validate()

    @classmethod
    def from_toml(cls, path):
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)


def _fill(klass, values, section):
    known = {f.name for f in fields(klass)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    obj = klass()
    for key, value in values.items():
        default = getattr(obj, key)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif type(default) is not type(value) and not isinstance(default, tuple):
            raise ConfigError(
                f"[{section}] {key}: expected {type(default).__name__}, got {type(value).__name__}"
            )
        setattr(obj, key, value)
    return obj


def load_config(path=None, seed=None):
    """Defaults, overlaid by ``path`` (TOML) and then by ``seed``."""
    cfg = PipelineConfig.from_toml(path) if path else PipelineConfig().validate()
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


# A cohort where each view sees one binary digit of an 8-way cluster id, so
# only the three views together pin down a concept's cluster.
PARTIAL_SIGNAL_SUITE = {
    "data": {"synthetic": {
        "view_signal": "partial", "n_clusters": 8, "n_codes": 160,
        "mean_codes_per_visit": 6.0, "p_in": 10.0, "p_out": 1.0,
        "dem_effect": 3.0, "lab_effect": 4.0, "lab_noise": 0.2,
        "token_noise": 0.0, "n_relation_pairs": 12,
    }},
    "graph": {"tau": 12},
    "eval": {"n_clusters": 8},
}


def partial_signal_config(seed=0):
    return PipelineConfig.from_dict(dict(PARTIAL_SIGNAL_SUITE, seed=seed))
