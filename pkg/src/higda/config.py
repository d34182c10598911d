"""Run configuration: nested dataclasses <-> JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import DomainShift, SyntheticSpec
from .gal import GalConfig
from .global_graph import GoGConfig
from .local_graph import LoGConfig
from .numerics import SgdConfig
from .objectives import MinimaxConfig


class ConfigKeyError(KeyError):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"unknown config key: {self.key}"


@dataclass
class DataConfig:
    # "synthetic" regenerates from `synthetic`; "materialized" reads a gen-data
    # output directory at `path`; "image_dir" loads PNG class folders.
    source: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    path: Optional[str] = None
    source_dir: Optional[str] = None
    target_dir: Optional[str] = None
    image_size: int = 32
    n_shot: int = 3
    split_seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synthetic", "materialized", "image_dir"):
            raise ValueError(f"data.source must be synthetic, materialized or image_dir, got {self.source!r}")


@dataclass
class RunConfig:
    log: LoGConfig = field(default_factory=LoGConfig)
    gog: GoGConfig = field(default_factory=GoGConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    minimax: MinimaxConfig = field(default_factory=MinimaxConfig)
    gal: GalConfig = field(default_factory=GalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 32
    # unlabeled batch size for the minimax term; defaults to batch_size
    unlabeled_batch_size: Optional[int] = None
    class_balanced: bool = False
    # supervised steps for `train`, and the pretraining budget for `gal`
    # (None: one episode's budget)
    train_steps: Optional[int] = None
    seed: int = 0
    precision: str = "float32"
    eval_modes: list = field(default_factory=lambda: ["batch_graph", "singleton"])

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def pretrain_steps(self) -> int:
        return self.gal.steps_per_episode if self.train_steps is None else self.train_steps


# key renames between JSON and Python fields
_ALIASES = {(MinimaxConfig, "lambda"): "lam"}
_REVERSE = {(cls, py): js for (cls, js), py in _ALIASES.items()}


def _hints(cls):
    return typing.get_type_hints(cls)


def from_dict(cls, doc: dict, prefix: str = ""):
    if not isinstance(doc, dict):
        raise ValueError(f"config section {prefix or '<root>'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    hints = _hints(cls)
    kwargs = {}
    for key, value in doc.items():
        name = _ALIASES.get((cls, key), key)
        if name not in names or name.startswith("_"):
            raise ConfigKeyError(prefix + key)
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            value = from_dict(tp, value, prefix + key + ".")
        kwargs[name] = value
    return cls(**kwargs)


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name.startswith("_"):
            continue
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        out[_REVERSE.get((type(obj), f.name), f.name)] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON, else as strings."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigKeyError(key)
            node = child
        node[parts[-1]] = _parse_value(raw)
    return doc


def load_config(path=None, overrides=None) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    if overrides:
        base = to_dict(from_dict(RunConfig, doc))
        doc = _merge(base, apply_overrides({}, overrides))
    return from_dict(RunConfig, doc)


def _merge(base: dict, patch: dict) -> dict:
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path


__all__ = ["RunConfig", "DataConfig", "DomainShift", "SyntheticSpec", "ConfigKeyError",
           "from_dict", "to_dict", "load_config", "dump_config", "apply_overrides"]
