"""Run configuration and its INI-file representation.

Every field lives in one section of the config file::

    [run]
    objective = poft
    seed = 0
    [optimizer]
    lr = 3e-4

and can be overridden from the command line as ``section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

OBJECTIVES = ("ce", "poft", "bi_poft", "dpo")

SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("name", "objective", "strategy", "seed", "epochs", "batch_size", "eval_every",
            "output_dir", "checked", "save_checkpoints", "eval_max_tokens"),
    "model": ("dim", "n_layers", "n_heads", "max_seq", "init_std", "tokenizer", "bpe_merges", "init_checkpoint"),
    "data": ("train_path", "eval_path", "score_cache", "ref_models"),
    "optimizer": ("lr", "beta1", "beta2", "weight_decay", "eps"),
    "schedule": ("warmup_fraction", "shape"),
    "dpo": ("dpo_beta", "dpo_reference"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    name: str = "run"
    objective: str = "ce"
    strategy: str = "avg"
    seed: int = 0
    epochs: int = 5
    batch_size: int = 32
    eval_every: int = 1
    output_dir: str = "runs/run"
    checked: bool = False
    save_checkpoints: bool = True
    eval_max_tokens: int = 0

    dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 128
    init_std: float = 0.02
    tokenizer: str = "char"
    bpe_merges: int = 0
    init_checkpoint: str = ""

    train_path: str = ""
    eval_path: str = ""
    score_cache: str = ""
    ref_models: tuple[str, ...] = field(default_factory=tuple)

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8

    warmup_fraction: float = 0.1
    shape: str = "cosine"

    dpo_beta: float = 0.1
    dpo_reference: str = ""

    def validate(self) -> "RunConfig":
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.strategy not in ("avg", "min", "max"):
            raise ConfigError("strategy must be avg, min or max")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.shape not in ("cosine", "linear"):
            raise ConfigError("schedule shape must be cosine or linear")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive")
        if self.tokenizer not in ("byte", "char", "bpe"):
            raise ConfigError("tokenizer must be byte, char or bpe")
        if self.dpo_beta <= 0:
            raise ConfigError("dpo_beta must be positive")
        if not self.train_path:
            raise ConfigError("train_path is required")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["ref_models"] = list(self.ref_models)
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_SECTION_OF = {key: section for section, keys in SECTIONS.items() for key in keys}
assert set(_SECTION_OF) == set(_FIELD_TYPES), "every RunConfig field needs a config section"


def _coerce(name: str, raw: Any) -> Any:
    kind = _FIELD_TYPES[name]
    if not isinstance(raw, str):
        return tuple(raw) if name == "ref_models" else raw
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    if name == "ref_models":
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """``overrides`` keys are ``field`` or ``section.field``."""
    changes = {}
    for key, value in overrides.items():
        section, _, name = key.rpartition(".")
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if section and _SECTION_OF[name] != section:
            raise ConfigError(f"{name} belongs to section [{_SECTION_OF[name]}], not [{section}]")
        changes[name] = _coerce(name, value)
    return config.replace(**changes)


def parse_override_args(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        out[key.strip()] = value
    return out


def load_config(path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            values[f"{section}.{key}"] = raw
    config = apply_overrides(RunConfig(), values)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def dump_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    data = config.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {}
        for k in keys:
            v = data[k]
            parser[section][k] = ",".join(v) if isinstance(v, list) else str(v)
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    return path
