"""One JSON document configures every stage; unknown keys are rejected.

Defaults keep the paper-shaped ratios at desk scale: retrieval keeps 200
candidates, the reader encodes 20 and decodes 4 (the 1000:100:20 chain
scaled by 1/5), both rerankers are 3-layer 2-head GATs, and the joint loss
weights reranking at 0.1.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datagen import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class RetrieverSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_text_len: int = 104
    n_candidates: int = 200  # passages returned by exact search
    train_steps: int = 300
    batch_size: int = 8
    n_negatives: int = 7
    lr: float = 1e-3
    weight_decay: float = 0.01


@dataclass
class RerankSection:
    gnn_layers: int = 3
    gnn_heads: int = 2
    gnn_type: str = "gat"  # "gat" uses graph edges, "mlp" drops them
    train_steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    eval_every: int = 50
    eval_k: int = 10

    def __post_init__(self):
        if self.gnn_type not in ("gat", "mlp"):
            raise ConfigError("rerank.gnn_type must be 'gat' or 'mlp'")

    @property
    def use_graph(self) -> bool:
        return self.gnn_type == "gat"


@dataclass
class ReaderSection:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    passage_len: int = 48
    answer_len: int = 8
    rerank_layer: int = 2
    n_input: int = 20   # candidates entering the encoder
    n_decode: int = 4   # passages kept for decoding
    rerank_loss_weight: float = 0.1
    gnn_layers: int = 3
    gnn_heads: int = 2
    gnn_type: str = "gat"
    answer_target: str = "first"
    train_steps: int = 300
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    eval_every: int = 50

    def __post_init__(self):
        if self.gnn_type not in ("gat", "mlp"):
            raise ConfigError("reader.gnn_type must be 'gat' or 'mlp'")

    @property
    def use_graph(self) -> bool:
        return self.gnn_type == "gat"


@dataclass
class CostSection:
    n_layers: int = 24
    n_input: int = 100
    n_decode: int = 20
    rerank_layers: list[int] = field(default_factory=lambda: [6, 12, 18, 24])


@dataclass
class EvalSection:
    hits_ks: list[int] = field(default_factory=lambda: [1, 5, 10, 20])


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    retriever: RetrieverSection = field(default_factory=RetrieverSection)
    rerank: RerankSection = field(default_factory=RerankSection)
    reader: ReaderSection = field(default_factory=ReaderSection)
    cost: CostSection = field(default_factory=CostSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        # one master seed drives every stage; the world section follows it
        self.world.seed = self.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or f.type in _SECTION_TYPES:
            kwargs[name] = _from_dict(_SECTION_TYPES.get(f.type, f.type), value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


# dataclass field types arrive as strings under `from __future__ import annotations`
_SECTION_TYPES = {
    "WorldConfig": WorldConfig,
    "RetrieverSection": RetrieverSection,
    "RerankSection": RerankSection,
    "ReaderSection": ReaderSection,
    "CostSection": CostSection,
    "EvalSection": EvalSection,
}


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def set_by_path(cfg: RunConfig, dotted: str, value):
    """Assign one config field by dotted path, e.g. 'rerank.gnn_layers'."""
    parts = dotted.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config path: {dotted}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ConfigError(f"unknown config path: {dotted}")
    current = getattr(target, leaf)
    if isinstance(current, bool):
        value = str(value).lower() in ("1", "true", "yes")
    elif isinstance(current, int):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    setattr(target, leaf, value)


# shorthand grid keys for the sweep command
GRID_ALIASES = {
    "gnn_layers": "rerank.gnn_layers",
    "gnn_type": "rerank.gnn_type",
    "reader_gnn_layers": "reader.gnn_layers",
    "n2": "reader.n_decode",
    "n_decode": "reader.n_decode",
    "lambda": "reader.rerank_loss_weight",
    "rerank_loss_weight": "reader.rerank_loss_weight",
    "p_link": "world.p_link",
}


def resolve_grid_key(key: str) -> str:
    return GRID_ALIASES.get(key, key)
