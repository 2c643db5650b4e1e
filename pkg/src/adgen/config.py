"""Run configuration: one key-value tree covering data, model, training, evaluation and output.

Unknown keys are rejected at every level. Values can be overridden with
dotted ``section.key=value`` assignments, parsed as YAML scalars.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SyntheticDomainConfig, TextureSpec
from .errors import ConfigError
from .features import ExtractorConfig
from .model import ModelConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "ADGEN_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    domains: tuple[str, ...] = ()
    target: str = ""


@dataclass(frozen=True)
class SyntheticConfig:
    size: int | None = None  # defaults to model.input_size
    domains: tuple[SyntheticDomainConfig, ...] = ()


@dataclass(frozen=True)
class EvalConfig:
    fraction: float = 1.0
    fractions: tuple[float, ...] = (0.1, 0.5, 1.0)
    seeds: tuple[int, ...] = (0,)
    fid_extractor: str = "model"  # or "inception"
    heatmap_smooth: float = 0.0


@dataclass(frozen=True)
class OutputConfig:
    root: str | None = None  # defaults to $ADGEN_OUTPUT_ROOT, then ./runs
    run_dir: str | None = None  # fixed directory instead of a timestamped one


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def input_size(self) -> int:
        return self.model.extractor.input_size

    @property
    def synthetic_size(self) -> int:
        return self.synthetic.size or self.input_size

    def source_domains(self) -> list[str]:
        return [d for d in self.data.domains if d != self.data.target]

    def output_root(self) -> Path:
        return Path(self.output.root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, values: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if isinstance(values, cls):
        return values
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        path = f"{where}.{name}" if where else name
        kwargs[name] = _convert(cls, name, value, path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "synthetic"): SyntheticConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "output"): OutputConfig,
    (ModelConfig, "extractor"): ExtractorConfig,
    (SyntheticDomainConfig, "texture"): TextureSpec,
}


def _convert(cls, name: str, value: Any, path: str):
    nested = _NESTED.get((cls, name))
    if nested is not None:
        return _build(nested, value, path)
    if cls is SyntheticConfig and name == "domains":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return tuple(_build(SyntheticDomainConfig, v, f"{path}[{i}]") for i, v in enumerate(value))
    if isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def config_from_dict(values: dict | None) -> RunConfig:
    return _build(RunConfig, values or {}, "")


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
    node[keys[-1]] = value


def apply_overrides(tree: dict, overrides: list[str] | None) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_dotted(tree, key.strip(), yaml.safe_load(raw))
    return tree


def load_config(path: Path | str | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML/JSON config file (optional), apply overrides, validate."""
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    apply_overrides(tree, overrides)
    return config_from_dict(tree)


def save_config(config: RunConfig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(json.dumps(config.to_dict(), indent=2))
    else:
        path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path
