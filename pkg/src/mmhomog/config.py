"""YAML experiment configuration.

One document with up to five sections, each mirroring a dataclass::

    generate:  GenerationConfig   (synthesise a corpus)
    data:      DataConfig         (or read one from disk, and how to split it)
    network:   NetworkConfig
    train:     TrainConfig        (``lambda`` is accepted for ``lambda_``)
    out:       output directory

Unknown keys at any level are errors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import GenerationConfig
from .errors import ConfigError
from .networks import NetworkConfig
from .trainer import TrainConfig

ALIASES = {"lambda": "lambda_"}


@dataclass
class DataConfig:
    corpus: str | None = None
    layout: str = "generated_manifest"
    fractions: list[float] = field(default_factory=lambda: [0.9, 0.1])
    split_seed: int = 0


@dataclass
class ExperimentConfig:
    generate: GenerationConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["lambda"] = d["train"].pop("lambda_")
        return d


def _build(cls, section: str, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        key = ALIASES.get(k, k)
        if key not in names:
            raise ConfigError(f"unknown key {section}.{k}")
        kwargs[key] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def parse_config(doc: dict | None) -> ExperimentConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    known = {"generate", "data", "network", "train", "out"}
    for k in doc:
        if k not in known:
            raise ConfigError(f"unknown top-level key {k!r}")
    return ExperimentConfig(
        generate=_build(GenerationConfig, "generate", doc["generate"]) if doc.get("generate") is not None else None,
        data=_build(DataConfig, "data", doc.get("data")),
        network=_build(NetworkConfig, "network", doc.get("network")),
        train=_build(TrainConfig, "train", doc.get("train")),
        out=doc.get("out"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)
