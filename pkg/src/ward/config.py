"""Layered run configuration: defaults < TOML file < WARD_* environment < flags."""
from __future__ import annotations

import dataclasses
import json
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError
from .generation import DEFAULT_MODEL, GenerationConfig

ENV_PREFIX = "WARD_"


@dataclass
class PathsConfig:
    out_dir: str = "out"
    discharge: str = ""
    aux_dir: str = ""
    corpus: str = ""
    templates: str = ""
    column_mapping: str = ""


@dataclass
class GenerationSettings:
    base_url: str = "http://127.0.0.1:11434"
    model_id: str = DEFAULT_MODEL
    temperature: float = 0.0
    seed: int = 0
    timeout_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 1.0
    repair: bool = True
    concurrency: int = 2

    def build(self) -> GenerationConfig:
        return GenerationConfig(
            base_url=self.base_url,
            model_id=self.model_id,
            temperature=self.temperature,
            seed=self.seed,
            timeout_s=self.timeout_s,
            max_retries=self.max_retries,
            backoff_s=self.backoff_s,
            repair=self.repair,
        )


@dataclass
class RetrievalSettings:
    embedder: str = "hashing"
    embed_url: str = ""
    embed_model: str = "all-minilm"
    dimension: int = 384
    concurrency: int = 4
    percentile: float = 95.0


@dataclass
class WordCountSettings:
    bhc_threshold: int = 450
    di_threshold: int = 280
    n_trees: int = 100
    max_depth: int = 12
    fixed_bhc: str = "420"
    fixed_di: str = "100-200"
    fallback: bool = True


@dataclass
class EvaluationSettings:
    smoothing: str = "none"
    scorers: list[dict] = field(default_factory=list)
    concurrency: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = "retrieved"
    tasks: list[str] = field(default_factory=lambda: ["BHC", "DI"])
    train_fraction: float = 0.8
    paths: PathsConfig = field(default_factory=PathsConfig)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    wordcount: WordCountSettings = field(default_factory=WordCountSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)

    def validate(self) -> "RunConfig":
        if self.strategy not in ("fixed", "retrieved", "classifier", "distribution"):
            raise ConfigurationError(f"strategy must be fixed|retrieved|classifier|distribution, got {self.strategy!r}")
        tasks = [t.upper() for t in self.tasks]
        if not tasks or any(t not in ("BHC", "DI") for t in tasks):
            raise ConfigurationError(f"tasks must be a non-empty subset of BHC, DI; got {self.tasks}")
        self.tasks = [t for t in ("BHC", "DI") if t in tasks]
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must be in (0, 1)")
        if self.retrieval.embedder not in ("hashing", "http"):
            raise ConfigurationError("retrieval.embedder must be 'hashing' or 'http'")
        for s in self.evaluation.scorers:
            if set(s) != {"name", "url"}:
                raise ConfigurationError(f"evaluation.scorers entries need exactly name and url, got {sorted(s)}")
        self.generation.build()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def out(self, *parts: str) -> Path:
        return Path(self.paths.out_dir, *parts)


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(value: Any, tp: Any, key: str, from_text: bool) -> Any:
    origin = typing.get_origin(tp)
    if origin is list:
        if from_text and isinstance(value, str):
            value = json.loads(value) if value.strip().startswith("[") else [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigurationError(f"{key}: expected a list, got {type(value).__name__}")
        return value
    if tp is bool:
        if from_text and isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    if tp is int:
        if from_text and isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                raise ConfigurationError(f"{key}: expected an integer, got {value!r}") from None
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    if tp is float:
        if from_text and isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigurationError(f"{key}: expected a number, got {value!r}") from None
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigurationError(f"{key}: expected a number, got {value!r}")
    if tp is str:
        if isinstance(value, str):
            return value
        raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    raise ConfigurationError(f"{key}: unsupported setting type {tp}")


def _apply(target, values: Mapping[str, Any], prefix: str, from_text: bool) -> None:
    hints = _hints(type(target))
    for key, value in values.items():
        dotted = f"{prefix}{key}"
        if key not in hints:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"{dotted}: expected a table")
            _apply(getattr(target, key), value, dotted + ".", from_text)
        else:
            setattr(target, key, _coerce(value, tp, dotted, from_text))


def _nest(flat: Mapping[str, Any]) -> dict:
    out: dict = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """``WARD_GENERATION__BASE_URL=...`` becomes ``generation.base_url``."""
    environ = os.environ if environ is None else environ
    flat = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            flat[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return _nest(flat)


def load_config(
    path: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Resolve a RunConfig. ``flags`` uses dotted keys, e.g. ``{"generation.base_url": ...}``."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid TOML: {exc}") from exc
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        _apply(cfg, doc, "", from_text=False)
    _apply(cfg, env_overrides(environ), "", from_text=True)
    if flags:
        _apply(cfg, _nest({k: v for k, v in flags.items() if v is not None}), "", from_text=True)
    return cfg.validate()


__all__ = ["ENV_PREFIX", "RunConfig", "env_overrides", "load_config"]
