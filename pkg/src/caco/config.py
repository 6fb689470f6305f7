"""Layered configuration: defaults, then YAML file, then CACO_* env, then CLI flags."""

from __future__ import annotations

import os
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .executor import (
    DEFAULT_MAX_STDOUT_BYTES,
    DEFAULT_MEMORY_BYTES,
    DEFAULT_WALL_MS,
    ExecLimits,
    SandboxExecutor,
)
from .gateway import Gateway, HttpBackend, MockBackend, PromptLibrary
from .model import SamplingParams
from .stages import Pipeline, PipelineOptions

ENV_PREFIX = "CACO"

_MISSING = object()
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    word = str(value).strip().lower()
    if word in _TRUE:
        return True
    if word in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"not an integer: {value!r}")
    return int(str(value).strip())


def _as_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError(f"not a number: {value!r}")
    return float(str(value).strip())


def _as_str(value: Any) -> str:
    return str(value)


def _as_path(value: Any) -> Path:
    return Path(str(value))


def _as_cmd(value: Any) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(str(part) for part in value)
    return tuple(shlex.split(str(value)))


def _choice(*allowed: str) -> Callable[[Any], str]:
    def check(value: Any) -> str:
        word = str(value).strip()
        if word not in allowed:
            raise ValueError(f"expected one of {allowed}, got {value!r}")
        return word

    return check


@dataclass
class PipelineSection:
    run_dir: Path | None = None
    seeds: Path | None = None
    sample_n: int = 0
    workers: int = 4
    min_lines: int = 6
    k_reverse: int = 1
    solve_rate_max: float | None = None
    audit_seed: int = 0
    deterministic_clock: bool = False


@dataclass
class SamplingSection:
    temperature: float = 0.9
    top_p: float = 1.0
    top_k: int = 0
    min_p: float = 0.0
    max_tokens: int = 1024


@dataclass
class GatewaySection:
    backend: str = "mock"
    base_url: str = ""
    model: str = ""
    api_key_env: str = "CACO_API_KEY"
    timeout_s: float = 120.0
    mock_script: Path | None = None
    max_in_flight: int = 4
    max_attempts: int = 3
    backoff_s: float = 0.5
    prompt_dir: Path | None = None


@dataclass
class ExecutorSection:
    wall_ms: int = DEFAULT_WALL_MS
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    max_stdout_bytes: int = DEFAULT_MAX_STDOUT_BYTES
    shim_cmd: tuple[str, ...] | None = None
    tmp_root: Path | None = None


@dataclass
class AppConfig:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    gateway: GatewaySection = field(default_factory=GatewaySection)
    executor: ExecutorSection = field(default_factory=ExecutorSection)


_SECTIONS: dict[str, tuple[type, dict[str, Callable[[Any], Any]]]] = {
    "pipeline": (
        PipelineSection,
        {
            "run_dir": _as_path,
            "seeds": _as_path,
            "sample_n": _as_int,
            "workers": _as_int,
            "min_lines": _as_int,
            "k_reverse": _as_int,
            "solve_rate_max": _as_float,
            "audit_seed": _as_int,
            "deterministic_clock": _as_bool,
        },
    ),
    "sampling": (
        SamplingSection,
        {
            "temperature": _as_float,
            "top_p": _as_float,
            "top_k": _as_int,
            "min_p": _as_float,
            "max_tokens": _as_int,
        },
    ),
    "gateway": (
        GatewaySection,
        {
            "backend": _choice("mock", "http"),
            "base_url": _as_str,
            "model": _as_str,
            "api_key_env": _as_str,
            "timeout_s": _as_float,
            "mock_script": _as_path,
            "max_in_flight": _as_int,
            "max_attempts": _as_int,
            "backoff_s": _as_float,
            "prompt_dir": _as_path,
        },
    ),
    "executor": (
        ExecutorSection,
        {
            "wall_ms": _as_int,
            "memory_bytes": _as_int,
            "max_stdout_bytes": _as_int,
            "shim_cmd": _as_cmd,
            "tmp_root": _as_path,
        },
    ),
}


def _read_file(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping at the top level")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def load_config(
    path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> AppConfig:
    """Resolve every key with precedence CLI override > environment > file > default."""
    env = os.environ if env is None else env
    overrides = overrides or {}
    file_data = _read_file(path) if path else {}
    known = {f"{s}.{k}" for s, (_, keys) in _SECTIONS.items() for k in keys}
    bad = {k for k, v in overrides.items() if v is not None} - known
    if bad:
        raise ConfigError(f"unknown override keys: {sorted(bad)}")

    sections: dict[str, Any] = {}
    for name, (cls, keys) in _SECTIONS.items():
        file_section = file_data.get(name) or {}
        if not isinstance(file_section, Mapping):
            raise ConfigError(f"config section {name!r} must be a mapping")
        unknown = set(file_section) - set(keys)
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
        values: dict[str, Any] = {}
        for key, coerce in keys.items():
            chosen = file_section.get(key, _MISSING)
            env_name = f"{ENV_PREFIX}_{name.upper()}_{key.upper()}"
            if env_name in env:
                chosen = env[env_name]
            dotted = f"{name}.{key}"
            if overrides.get(dotted) is not None:
                chosen = overrides[dotted]
            if chosen is _MISSING or chosen is None:
                continue
            try:
                values[key] = coerce(chosen)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {dotted}: {chosen!r} ({exc})") from exc
        sections[name] = cls(**values)

    config = AppConfig(**sections)
    _validate(config)
    return config


def _validate(config: AppConfig) -> None:
    if config.gateway.backend == "http" and not config.gateway.base_url:
        raise ConfigError("gateway.base_url is required for the http backend")
    if config.gateway.backend == "http" and not config.gateway.model:
        raise ConfigError("gateway.model is required for the http backend")
    try:
        sampling_params(config)
        ExecLimits(
            wall_ms=config.executor.wall_ms,
            memory_bytes=config.executor.memory_bytes,
            max_stdout_bytes=config.executor.max_stdout_bytes,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if config.pipeline.sample_n < 0:
        raise ConfigError("pipeline.sample_n must be >= 0")
    if config.pipeline.workers < 1:
        raise ConfigError("pipeline.workers must be >= 1")
    if config.pipeline.min_lines < 0:
        raise ConfigError("pipeline.min_lines must be >= 0")
    if config.pipeline.k_reverse < 1:
        raise ConfigError("pipeline.k_reverse must be >= 1")
    cap = config.pipeline.solve_rate_max
    if cap is not None and not (0.0 <= cap <= 1.0):
        raise ConfigError("pipeline.solve_rate_max must lie in [0, 1]")


def sampling_params(config: AppConfig) -> SamplingParams:
    s = config.sampling
    return SamplingParams(
        temperature=s.temperature,
        top_p=s.top_p,
        top_k=s.top_k,
        min_p=s.min_p,
        max_tokens=s.max_tokens,
    )


def build_gateway(config: AppConfig, prompts: PromptLibrary | None = None) -> Gateway:
    g = config.gateway
    prompts = prompts or PromptLibrary(
        prompt_dir=str(g.prompt_dir) if g.prompt_dir else None
    )
    if g.backend == "mock":
        if g.mock_script:
            backend = MockBackend.from_file(g.mock_script)
        else:
            backend = MockBackend({})
    else:
        backend = HttpBackend(
            endpoint=g.base_url,
            models=g.model,
            api_key=os.environ.get(g.api_key_env) or None,
            timeout_s=g.timeout_s,
        )
    return Gateway(
        backend,
        prompts=prompts,
        max_in_flight=g.max_in_flight,
        max_attempts=g.max_attempts,
        backoff_s=g.backoff_s,
    )


def build_executor(config: AppConfig) -> SandboxExecutor:
    e = config.executor
    return SandboxExecutor(
        shim_cmd=tuple(e.shim_cmd) if e.shim_cmd else None,
        limits=ExecLimits(
            wall_ms=e.wall_ms,
            memory_bytes=e.memory_bytes,
            max_stdout_bytes=e.max_stdout_bytes,
        ),
        tmp_root=str(e.tmp_root) if e.tmp_root else None,
    )


def build_pipeline(
    config: AppConfig,
    gateway: Gateway | None = None,
    executor: SandboxExecutor | None = None,
) -> Pipeline:
    p = config.pipeline
    options = PipelineOptions(
        run_dir=p.run_dir,
        seeds_path=p.seeds,
        sample_n=p.sample_n,
        workers=p.workers,
        min_lines=p.min_lines,
        k_reverse=p.k_reverse,
        solve_rate_max=p.solve_rate_max,
        audit_seed=p.audit_seed,
        sample_params=sampling_params(config),
        deterministic_clock=p.deterministic_clock,
    )
    return Pipeline(
        gateway or build_gateway(config),
        executor or build_executor(config),
        options,
    )
