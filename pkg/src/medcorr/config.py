"""Engine configuration: one YAML file, strict schema, env overrides.

Unknown keys are rejected. ``MEDCORR_API_KEY`` and ``MEDCORR_BASE_URL``
override the corresponding file values (environment wins). Defaults mirror
the engine's pinned generation and optimization settings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Mapping

import yaml

from .errors import ConfigError

API_KEY_ENV = "MEDCORR_API_KEY"
BASE_URL_ENV = "MEDCORR_BASE_URL"

BACKENDS = ("live", "replay", "scripted")
SELECTORS = ("ms", "uw")


@dataclass(frozen=True)
class GatewayConfig:
    backend: str = "replay"
    base_url: str = "https://api.openai.com/v1"
    api_key: str = ""
    model: str = "gpt-4-0125-preview"
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 4096
    concurrency: int = 4
    cache_path: str = "cache.jsonl"
    record: bool = False


@dataclass(frozen=True)
class PathsConfig:
    records: str = ""
    mcq_corpus: str = ""
    index: str = ""
    compiled_dir: str = ""
    output_dir: str = "."


@dataclass(frozen=True)
class OptimizeConfig:
    seed: int = 0
    n_candidates: int = 16
    demos_per_stage: int = 20
    instruction_proposals: int = 5
    binary_pass_threshold: float = 1.0
    rouge_pass_threshold: float = 0.8


@dataclass(frozen=True)
class PipelineConfig:
    selector: str = "uw"
    gate_threshold: float = 0.7
    ms_gate_enabled: bool = False
    strict: bool = False


@dataclass(frozen=True)
class EngineConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


_SECTIONS = {
    "gateway": GatewayConfig,
    "paths": PathsConfig,
    "optimize": OptimizeConfig,
    "pipeline": PipelineConfig,
}


def _build_section(name: str, cls: type, raw: object) -> object:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f.type for f in dataclass_fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    coerced = {}
    defaults = cls()
    for key, value in raw.items():
        default = getattr(defaults, key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{name}.{key} must be a boolean, got {value!r}")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number, got {value!r}")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}.{key} must be a string, got {value!r}")
        coerced[key] = value
    return cls(**coerced)


def _validate(config: EngineConfig) -> None:
    gw = config.gateway
    if gw.backend not in BACKENDS:
        raise ConfigError(f"gateway.backend must be one of {list(BACKENDS)}, got {gw.backend!r}")
    if gw.temperature < 0:
        raise ConfigError(f"gateway.temperature must be >= 0, got {gw.temperature}")
    if not 0.0 <= gw.top_p <= 1.0:
        raise ConfigError(f"gateway.top_p must be in [0, 1], got {gw.top_p}")
    if gw.max_tokens < 1:
        raise ConfigError(f"gateway.max_tokens must be >= 1, got {gw.max_tokens}")
    if gw.concurrency < 1:
        raise ConfigError(f"gateway.concurrency must be >= 1, got {gw.concurrency}")
    opt = config.optimize
    if opt.n_candidates < 1:
        raise ConfigError(f"optimize.n_candidates must be >= 1, got {opt.n_candidates}")
    if opt.demos_per_stage < 1:
        raise ConfigError(f"optimize.demos_per_stage must be >= 1, got {opt.demos_per_stage}")
    if opt.instruction_proposals < 1:
        raise ConfigError(
            f"optimize.instruction_proposals must be >= 1, got {opt.instruction_proposals}"
        )
    for key in ("binary_pass_threshold", "rouge_pass_threshold"):
        value = getattr(opt, key)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"optimize.{key} must be in [0, 1], got {value}")
    pipe = config.pipeline
    if pipe.selector not in SELECTORS:
        raise ConfigError(f"pipeline.selector must be one of {list(SELECTORS)}, got {pipe.selector!r}")
    if not 0.0 <= pipe.gate_threshold <= 1.0:
        raise ConfigError(f"pipeline.gate_threshold must be in [0, 1], got {pipe.gate_threshold}")


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None) -> EngineConfig:
    """Load, default, env-override, and validate the engine configuration.

    ``path=None`` yields pure defaults (still env-overridable).
    """
    env = os.environ if env is None else env
    raw: object = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping of sections")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {
        name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()
    }
    config = EngineConfig(**sections)  # type: ignore[arg-type]

    overrides = {}
    if env.get(API_KEY_ENV):
        overrides["api_key"] = env[API_KEY_ENV]
    if env.get(BASE_URL_ENV):
        overrides["base_url"] = env[BASE_URL_ENV]
    if overrides:
        from dataclasses import replace

        config = EngineConfig(
            gateway=replace(config.gateway, **overrides),
            paths=config.paths,
            optimize=config.optimize,
            pipeline=config.pipeline,
        )
    _validate(config)
    return config
