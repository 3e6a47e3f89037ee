"""
Run configuration
=================

One JSON document holds every hyperparameter of a run. Unknown keys are
rejected, every field is validated before any computation starts, and the
resolved form (all defaults filled in) is what gets written next to outputs.

Seed splitting: a single master seed drives everything. The seed of a
component ``name`` in repetition ``rep`` is the first 63-bit word of
``numpy.random.SeedSequence([master, rep, crc32(name)])``. The synthetic
corpus uses repetition 0 of component ``"corpus"`` so every repetition sees
the same data.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .basemodels import BaseModelSpec
from .data import CsvSchema, RegimeSpec, SyntheticConfig
from .embedding import EmbeddingConfig
from .errors import ConfigError, WindEnsembleError


def derive_seed(master, rep, name):
    ss = np.random.SeedSequence([int(master), int(rep), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class CsvCorpus:
    series: tuple            # one or more CSV paths
    metadata: str            # farm metadata CSV
    schema: CsvSchema = CsvSchema()


@dataclass(frozen=True)
class AgentSettings:
    """Actor-critic settings; state and action sizes are derived at run time."""

    actor_hidden: tuple = (32,)
    critic_hidden: tuple = (64,)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.9
    batch_size: int = 32
    capacity: int = 4096
    total_steps: int = 20000
    noise_start: float = 0.3
    noise_end: float = 0.01
    warmup_factor: int = 4
    actor_delay: int = 0
    reward: str = "absolute"
    reward_scale: float | None = None      # None: 1 for relative rewards, else the uniform ensemble's mean loss
    reward_window: int = 48
    standardize_states: bool = True
    shared: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        from .rlens import ActorCriticConfig

        # the agent's own checks, with placeholder sizes
        ActorCriticConfig(1, 1, **{k: v for k, v in asdict(self).items()
                                   if k not in ("reward_scale", "standardize_states")},
                          reward_scale=self.reward_scale or 1.0)


DEFAULT_POOL = (BaseModelSpec("persistence"), BaseModelSpec("autoregressive", p=3),
                BaseModelSpec("boosted_stumps", rounds=100, shrinkage=0.1),
                BaseModelSpec("graph_regressor", gnn_layers=1, epochs=20))


@dataclass(frozen=True)
class RunConfig:
    synthetic: SyntheticConfig | None = SyntheticConfig()
    csv: CsvCorpus | None = None
    window: int = 24
    horizon: int = 1
    graph_k: int = 3
    train_fraction: float = 0.7
    agent_fraction: float = 0.4
    embedding: EmbeddingConfig = EmbeddingConfig()
    mle_epochs: int = 40
    pool: tuple = DEFAULT_POOL
    agent: AgentSettings = AgentSettings()
    repetitions: int = 1
    seed: int = 0
    denormalize: bool = False
    output_dir: str = "runs"

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError("corpus", "exactly one of 'synthetic' and 'csv' must be given")
        if self.window < 1:
            raise ConfigError("window", "must be >= 1")
        if self.embedding.window != self.window:
            raise ConfigError("embedding.window", f"must equal window ({self.window})")
        if self.horizon < 1:
            raise ConfigError("horizon", "must be >= 1")
        if self.graph_k < 0:
            raise ConfigError("graph_k", "must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction", "must lie in (0, 1)")
        if not 0.0 < self.agent_fraction < 1.0:
            raise ConfigError("agent_fraction", "must lie in (0, 1)")
        if not self.pool:
            raise ConfigError("pool", "at least one base model is required")
        labels = [s.label for s in self.pool]
        if len(set(labels)) != len(labels):
            raise ConfigError("pool", f"duplicate model labels {labels}; set 'name' to disambiguate")
        if self.repetitions < 1:
            raise ConfigError("repetitions", "must be >= 1")
        if self.mle_epochs < 1:
            raise ConfigError("mle_epochs", "must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")

    def to_dict(self):
        return _plain(asdict(self))

    def fingerprint(self):
        doc = self.to_dict()
        doc.pop("output_dir")
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=True) + "\n"


# ---------------------------------------------------------------- parsing

def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(where, f"expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}" if where else unknown[0], "unknown key")
    kw = {}
    for k, v in doc.items():
        kw[k] = tuple(v) if isinstance(v, list) and k in _TUPLE_FIELDS else v
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (WindEnsembleError, TypeError, ValueError) as exc:
        raise ConfigError(where or cls.__name__, str(exc)) from exc


_TUPLE_FIELDS = {"dilations", "actor_hidden", "critic_hidden", "center", "farm_columns", "series"}


def config_from_dict(doc: dict) -> RunConfig:
    """Validate and build a :class:`RunConfig`; raises :class:`ConfigError` naming the field."""
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")
    doc = dict(doc)
    if "synthetic" in doc and doc["synthetic"] is not None:
        syn = dict(doc["synthetic"]) if isinstance(doc["synthetic"], dict) else doc["synthetic"]
        if isinstance(syn, dict) and "regimes" in syn:
            syn["regimes"] = tuple(_build(RegimeSpec, r, f"synthetic.regimes[{i}]")
                                   for i, r in enumerate(syn["regimes"]))
        doc["synthetic"] = _build(SyntheticConfig, syn, "synthetic")
    if "csv" in doc and doc["csv"] is not None:
        c = dict(doc["csv"]) if isinstance(doc["csv"], dict) else doc["csv"]
        if isinstance(c, dict):
            if isinstance(c.get("series"), str):
                c["series"] = [c["series"]]
            if "schema" in c:
                c["schema"] = _build(CsvSchema, c["schema"], "csv.schema")
            if "synthetic" not in doc:
                doc["synthetic"] = None
        doc["csv"] = _build(CsvCorpus, c, "csv")
    window = doc.get("window", RunConfig.window)
    if not isinstance(window, int) or window < 1:
        raise ConfigError("window", "must be an integer >= 1")
    emb_doc = dict(doc.get("embedding", {}))
    emb_doc.setdefault("window", window)
    doc["embedding"] = _build(EmbeddingConfig, emb_doc, "embedding")
    if "pool" in doc:
        if not isinstance(doc["pool"], list):
            raise ConfigError("pool", "must be a list of model specs")
        doc["pool"] = tuple(_build(BaseModelSpec, s, f"pool[{i}]") for i, s in enumerate(doc["pool"]))
    if "agent" in doc:
        doc["agent"] = _build(AgentSettings, doc["agent"], "agent")
    return _build(RunConfig, doc, "")


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {p}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{p}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


def config_from_resolved(doc: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict`."""
    return config_from_dict(doc)
