"""Pipeline configuration with layered sources.

Precedence, highest first: command-line flag, YAML config file, environment
variable ``EVIDA_<FIELD>``, built-in default. Secrets (API keys, encoder
tokens) are only ever read from the environment by the clients themselves.

Example file::

    retrieval:
      k: 10
      n_min: 30
    thresholds:
      tau1: 0.33
      tau2: 0.67
    llm:
      base_url: http://localhost:8000/v1
      model: Qwen/Qwen3-8B
      temperature: 0.6
    weights:
      lambda1: 0.25
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .inference import InferenceConfig
from .llm import DecodingParams
from .rewards import RewardWeights
from .values import Thresholds

ENV_PREFIX = "EVIDA_"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # paths
    microdata: str | None = None
    items: str | None = None
    bank: str | None = None
    cache_dir: str | None = None
    out: str | None = None
    delimiter: str = "\t"
    # encoder
    encoder_url: str | None = None
    encoder_model: str = ""
    encoder_dim: int = 256
    encoder_seed: int = 0
    # llm
    llm_base_url: str | None = None
    llm_model: str | None = None
    temperature: float = 0.7
    top_p: float | None = None
    top_k: int | None = None
    max_tokens: int = 1024
    llm_seed: int | None = None
    # method
    tau1: float = 0.33
    tau2: float = 0.67
    k: int = 10
    n_min: int = 30
    tol: float = 0.01
    retries: int = 2
    lambda1: float = 0.25
    lambda2: float = 0.45
    lambda3: float = 0.15
    lambda4: float = 0.15
    group_size: int = 16
    seed: int = 0
    ablation: str = "none"
    max_in_flight: int = 4

    def thresholds(self) -> Thresholds:
        return Thresholds(self.tau1, self.tau2)

    def weights(self) -> RewardWeights:
        return RewardWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def decoding(self) -> DecodingParams:
        return DecodingParams(self.temperature, self.max_tokens, self.top_p, self.top_k, self.llm_seed)

    def inference(self) -> InferenceConfig:
        return InferenceConfig(
            k=self.k, n_min=self.n_min, tol=self.tol, retries=self.retries,
            decoding=self.decoding(), ablation=self.ablation,
        )


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    ftype = str(_FIELDS[name].type)
    try:
        if ftype.startswith("int"):
            return int(value)
        if ftype.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {name}: {value!r}") from e


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        key = str(key).replace("-", "_")
        if isinstance(value, Mapping):
            for sub, v in _flatten(value, key).items():
                flat[sub] = v
            continue
        joined = f"{prefix}_{key}" if prefix else key
        if joined in _FIELDS:
            flat[joined] = value
        elif key in _FIELDS:
            flat[key] = value
        else:
            raise ConfigError(f"unknown config key {joined!r}")
    return flat


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    environ = os.environ if environ is None else environ
    values: dict[str, Any] = {}
    for name in _FIELDS:
        env_key = ENV_PREFIX + name.upper()
        if env_key in environ:
            values[name] = _coerce(name, environ[env_key])
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(tree, Mapping):
            raise ConfigError("config file must hold a mapping")
        for name, value in _flatten(tree).items():
            values[name] = _coerce(name, value)
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = _coerce(name, value)
    cfg = dataclasses.replace(PipelineConfig(), **values)
    try:
        cfg.thresholds()
        cfg.weights()
        cfg.inference()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg
