"""Experiment configuration: one JSON document, strictly validated.

Sections map onto the package's config dataclasses.  Unknown keys are
rejected with their dotted path, every default is materialized in the
resolved document, and the top-level ``seed`` is propagated into each
section that carries its own seed.
"""

from __future__ import annotations

import collections.abc
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from .corpus import CorpusSpec, DomainShift
from .diffusion import NoiseSchedule, SamplerConfig
from .errors import ConfigError
from .mmd import KernelConfig
from .training import SEDTrainConfig
from .tts import TTSTrainConfig


@dataclass(frozen=True)
class PathsConfig:
    workdir: str = "runs"
    checkpoint_dir: str = "checkpoints"


@dataclass(frozen=True)
class AblationConfig:
    sed_seeds: int = 5
    tts_seeds: int = 3

    def __post_init__(self):
        # zero skips that half of the grid
        if self.sed_seeds < 0 or self.tts_seeds < 0:
            raise ValueError("seed counts must be >= 0")


def tuned_corpus() -> CorpusSpec:
    """The harder domain-shift setting used by the experiment defaults."""
    return CorpusSpec(
        noise_std=0.3,
        template_scale=0.2,
        modulation_scale=0.2,
        phoneme_scale=0.25,
        speaker_scale=0.15,
        target_class_prior=(0.4, 0.2, 0.2, 0.2),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=tuned_corpus)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    sed_train: SEDTrainConfig = field(default_factory=lambda: SEDTrainConfig(epochs=40))
    tts_train: TTSTrainConfig = field(default_factory=TTSTrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            corpus=dataclasses.replace(self.corpus, seed=seed),
            sed_train=dataclasses.replace(self.sed_train, seed=seed),
            tts_train=dataclasses.replace(self.tts_train, seed=seed),
        )

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(tp, value, path: str, base=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        return _build(tp, value, path, base)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (tuple, collections.abc.Sequence):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        elem = args[0] if args else float
        return tuple(_coerce(elem, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, doc, path: str, base=None):
    """Instantiate ``cls`` from ``doc`` overlaid on ``base`` (or on plain defaults)."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in doc:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    if base is not None:
        kwargs = {name: getattr(base, name) for name in names}
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        sub = getattr(base, key) if base is not None else None
        kwargs[key] = _coerce(hints[key], value, where, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def config_from_dict(doc: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate; the top-level seed is pushed into every section."""
    cfg = _build(ExperimentConfig, doc, "", ExperimentConfig())
    return cfg.with_seed(cfg.seed)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


__all__ = [
    "AblationConfig",
    "DomainShift",
    "ExperimentConfig",
    "PathsConfig",
    "config_from_dict",
    "load_config",
    "tuned_corpus",
]
