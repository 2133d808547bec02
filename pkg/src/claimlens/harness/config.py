"""Run configuration: one YAML file, overridable per-field through
``CD_``-prefixed environment variables (e.g. ``CD_BATCH_SIZE=32``)."""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

logger = logging.getLogger(__name__)

ENV_PREFIX = "CD_"


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # retrieval
    k1: int = 4
    k2: int = 0
    block_budget: int = 500
    bm25_k1: float = 0.9
    bm25_b: float = 0.4
    negative_lo: int = 50
    negative_hi: int = 200
    n_negatives: int = 2
    # model
    dim: int = 48
    layers: int = 2
    heads: int = 4
    max_len: int = 512
    dropout: float = 0.1
    # training (desk-scale defaults; full-scale values documented in README)
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    eval_every: int = 500
    max_steps: int = 2000
    seed: int = 0
    supervision: str = "sentence"
    lambda_relevance: float = 1.0
    lambda_l2: float = 1.0
    lambda_relevance_block: float = 0.7
    sse_warmup: int = 1000
    sse_ramp_end: int = 3000
    sse_p_max: float = 0.95
    # masker
    masker_lr: float | None = None  # None: fall back to lr
    lambda_sparsity: float = 1.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_warmup: int = 100
    tau_ramp_end: int = 700
    # inference
    conflict_threshold: float = 0.9

    def __post_init__(self) -> None:
        for name in ("k1", "block_budget", "batch_size", "warmup_steps", "eval_every", "dim", "layers", "heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.k2 < 0:
            raise ConfigError("k2 must be non-negative")
        if self.supervision not in ("sentence", "block", "block+sse"):
            raise ConfigError(f"unknown supervision mode {self.supervision!r}")


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name: str, raw: str) -> Any:
    target = _FIELDS[name].type
    try:
        if target == "int":
            return int(raw)
        if target in ("float", "float | None"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name}={raw!r}: {exc}") from exc


def load_config(
    path: str | Path | None = None, env: Mapping[str, str] | None = None
) -> Config:
    """Defaults, then the YAML file (if any), then ``CD_*`` overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping, got {type(loaded).__name__}")
        for key, value in loaded.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown configuration key {key!r} in {path}")
            values[key] = value
    env = os.environ if env is None else env
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in _FIELDS:
            logger.warning("ignoring unrecognized environment override %s", key)
            continue
        values[name] = _coerce(name, raw)
    try:
        return Config(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(config: Config, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(dataclasses.asdict(config), fh, sort_keys=False)
