"""Run configuration with flags > environment > config file > defaults.

Defaults mirror the pipeline's standard operating point: batches of 5,
a 20-article screening budget, an unlimited token budget, and 3
refinement iterations.  Stage temperatures default to 0 everywhere for
reproducible extraction; critique/refinement stages accept a higher
setting (0.8 is the documented alternative) via ``temperatures``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional


class ConfigError(Exception):
    pass


# config field -> environment variable
ENV_VARS = {
    "llm_backend": "PMQA_LLM_BACKEND",
    "search_backend": "PMQA_SEARCH_BACKEND",
    "model": "PMQA_MODEL",
    "judge_model": "PMQA_JUDGE_MODEL",
    "base_url": "PMQA_BASE_URL",
    "api_key": "PMQA_API_KEY",
    "ncbi_api_key": "PMQA_NCBI_API_KEY",
    "ncbi_email": "PMQA_NCBI_EMAIL",
    "script_path": "PMQA_SCRIPT",
    "fixture_path": "PMQA_FIXTURE",
    "out_dir": "PMQA_OUT_DIR",
    "m": "PMQA_BATCH_SIZE",
    "m_max": "PMQA_MAX_ARTICLES",
    "token_budget": "PMQA_TOKEN_BUDGET",
    "refine_budget": "PMQA_MESH_BUDGET",
    "parallelism": "PMQA_PARALLELISM",
    "rate_limit_rps": "PMQA_RATE_LIMIT",
    "retry_attempts": "PMQA_RETRY_ATTEMPTS",
    "allow_same_judge_model": "PMQA_ALLOW_SAME_JUDGE",
}

_INT_FIELDS = {"m", "m_max", "token_budget", "refine_budget", "parallelism", "retry_attempts"}
_FLOAT_FIELDS = {"rate_limit_rps"}
_BOOL_FIELDS = {"allow_same_judge_model"}
_SECRET_FIELDS = {"api_key", "ncbi_api_key"}


@dataclass
class RunConfig:
    llm_backend: str = "mock"        # mock | live
    search_backend: str = "fixture"  # fixture | live
    model: str = ""
    judge_model: str = ""
    base_url: str = ""
    api_key: str = ""
    ncbi_api_key: str = ""
    ncbi_email: str = ""
    script_path: str = ""
    fixture_path: str = ""
    out_dir: str = "runs"
    m: int = 5
    m_max: int = 20
    token_budget: Optional[int] = None
    refine_budget: int = 3
    parallelism: int = 1
    rate_limit_rps: float = 3.0
    retry_attempts: int = 3
    temperatures: dict = field(default_factory=dict)
    allow_same_judge_model: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("batch size m must be >= 1")
        if self.m_max < 1:
            raise ConfigError("max articles m_max must be >= 1")
        if self.refine_budget < 1:
            raise ConfigError("refinement budget must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.llm_backend not in ("mock", "live"):
            raise ConfigError(f"unknown llm backend {self.llm_backend!r}")
        if self.search_backend not in ("fixture", "live"):
            raise ConfigError(f"unknown search backend {self.search_backend!r}")
        if self.token_budget is not None and self.token_budget < 1:
            raise ConfigError("token budget must be >= 1 or unset")

    def temperature(self, stage: str) -> float:
        return float(self.temperatures.get(stage, 0.0))

    def echo(self) -> dict:
        """Resolved values for the trace; secrets reduced to set/unset."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in _SECRET_FIELDS:
                value = "<set>" if value else ""
            out[f.name] = value
        return out

    @classmethod
    def resolve(cls, flags: Optional[dict] = None, env: Optional[dict] = None,
                config_file: Optional[str] = None) -> "RunConfig":
        """Merge the precedence chain into one validated config."""
        env = os.environ if env is None else env
        merged: dict = {}

        if config_file:
            try:
                with open(config_file, "r", encoding="utf-8") as fh:
                    file_values = json.load(fh)
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {config_file}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError("config file must hold a JSON object")
            known = {f.name for f in fields(cls)}
            unknown = set(file_values) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            merged.update(file_values)

        for name, var in ENV_VARS.items():
            if var in env and env[var] != "":
                merged[name] = _coerce(name, env[var])

        for name, value in (flags or {}).items():
            if value is not None:
                merged[name] = value

        try:
            return cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(name: str, raw: str):
    if name in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{ENV_VARS[name]} must be an integer, got {raw!r}") from exc
    if name in _FLOAT_FIELDS:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{ENV_VARS[name]} must be a number, got {raw!r}") from exc
    if name in _BOOL_FIELDS:
        return raw.strip().casefold() in ("1", "true", "yes")
    return raw


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
