"""Declarative run configuration shared by the CLI stages.

Configs are YAML or JSON files whose keys match RunConfig field names
verbatim. Every field has a default, so an empty file (or no file) is a
valid configuration. Unknown keys are rejected at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Mapping

import yaml

from .errors import ConfigError
from .evaluate import DEFAULT_HASH_DIM, DEFAULT_LEARNING_RATE
from .events import DENOISE_MAX_DWELL_MS, DENOISE_MIN_DWELL_MS
from .segmentation import DEFAULT_EPOCH_MS, DEFAULT_TARGET_ACTIVE_FRACTION
from .stats import (
    DEFAULT_BUFFER_MS,
    DEFAULT_HORIZON_MS,
    DEFAULT_N_MIN,
    NORMALIZATIONS,
    RAW,
)
from .validation import (
    check_choice,
    check_fraction,
    check_non_negative,
    check_positive,
)

STATS_MODES = ("cumulative", "sliding")


@dataclass
class RunConfig:
    """Knobs for the labeling window, denoising, segmentation and eval."""

    horizon_s_ms: int = DEFAULT_HORIZON_MS
    buffer_ms: int = DEFAULT_BUFFER_MS
    denoise_min_dwell_ms: int = DENOISE_MIN_DWELL_MS
    denoise_max_dwell_ms: int = DENOISE_MAX_DWELL_MS
    n_min: int = DEFAULT_N_MIN
    target_active_fraction: float = DEFAULT_TARGET_ACTIVE_FRACTION
    epoch_ms: int = DEFAULT_EPOCH_MS
    stats_mode: str = "cumulative"
    correlation_normalization: str = RAW
    segment_levels: int = 2
    fixed_epsilon: float | None = None
    policy_file: str | None = None
    seeds: tuple[int, ...] = (101, 102, 103)
    replicas: int = 3
    learning_rate: float = DEFAULT_LEARNING_RATE
    hash_dim: int = DEFAULT_HASH_DIM

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        check_positive("horizon_s_ms", self.horizon_s_ms)
        check_non_negative("buffer_ms", self.buffer_ms)
        check_non_negative("denoise_min_dwell_ms", self.denoise_min_dwell_ms)
        if self.denoise_min_dwell_ms >= self.denoise_max_dwell_ms:
            raise ConfigError(
                "denoise bounds must satisfy min < max, got "
                f"[{self.denoise_min_dwell_ms}, {self.denoise_max_dwell_ms}]"
            )
        if not isinstance(self.n_min, int) or self.n_min < 1:
            raise ConfigError(f"n_min must be an integer >= 1, got {self.n_min!r}")
        check_fraction("target_active_fraction", self.target_active_fraction)
        check_positive("epoch_ms", self.epoch_ms)
        check_choice("stats_mode", self.stats_mode, STATS_MODES)
        check_choice("correlation_normalization", self.correlation_normalization,
                     NORMALIZATIONS)
        if self.segment_levels != 2:
            # Config hook for finer segmentations; only two levels exist today.
            raise ConfigError(
                f"segment_levels={self.segment_levels} is not supported; only 2 "
                "(active/passive) is implemented"
            )
        if self.fixed_epsilon is not None:
            check_non_negative("fixed_epsilon", self.fixed_epsilon)
        if not isinstance(self.replicas, int) or self.replicas < 1:
            raise ConfigError(f"replicas must be an integer >= 1, got {self.replicas!r}")
        seeds = tuple(self.seeds)
        if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError(f"seeds must be integers, got {self.seeds!r}")
        if len(seeds) < self.replicas:
            raise ConfigError(
                f"need at least {self.replicas} seeds for {self.replicas} replicas, "
                f"got {len(seeds)}"
            )
        self.seeds = seeds
        check_positive("learning_rate", self.learning_rate)
        if not isinstance(self.hash_dim, int) or self.hash_dim < 2:
            raise ConfigError(f"hash_dim must be an integer >= 2, got {self.hash_dim!r}")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError(f"config must be a mapping, got {type(raw).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "seeds" in kwargs:
            seeds = kwargs["seeds"]
            if isinstance(seeds, str) or not hasattr(seeds, "__iter__"):
                raise ConfigError(f"seeds must be a list of integers, got {seeds!r}")
            kwargs["seeds"] = tuple(seeds)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


def load_run_config(path: str | None) -> RunConfig:
    """Load a config file; None means all defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        if path.endswith(".json"):
            raw = json.loads(text)
        else:
            raw = yaml.safe_load(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: cannot parse config: {exc.msg}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: cannot parse config: {exc}") from exc
    if raw is None:
        raw = {}
    try:
        return RunConfig.from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
