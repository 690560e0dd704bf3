"""Experiment configuration: defaults, INI files, env and CLI overrides.

Config files are INI-style ``key = value`` entries; section headers are
allowed for readability but the key namespace is flat and must match the
`ExperimentConfig` field names. Precedence: defaults < file < environment
variables (prefix ``FEDRECSIM_``, e.g. ``FEDRECSIM_ROUNDS=100``) < explicit
overrides (CLI flags).
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass

from .errors import ConfigError

ENV_PREFIX = "FEDRECSIM_"

ATTACKS = ("none", "pieckipe", "pieckuea", "oracle")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"          # "synthetic" or a path to an interaction log
    q: float = 1.0
    synth_users: int = 2000
    synth_items: int = 800
    synth_exponent: float = 1.2
    synth_interactions: int = 30
    # model
    model_family: str = "mf"            # "mf" | "dl"
    dim: int = 32
    dl_layers: tuple = (32, 16, 8)
    mf_score_mode: str = "sigmoid"      # "sigmoid" | "clamped_raw"
    init_scale: float = 0.01
    # federation
    eta: float = 1.0
    round_batch: int = 256
    rounds: int = 500
    # attack
    attack: str = "none"
    malicious_ratio: float = 0.05       # fraction of the total user pool
    target_items: tuple = ()            # empty -> auto-select cold items
    num_targets: int = 1
    mining_rounds: int = 2
    mined_count: int = 0                # 0 -> per-attack default (ipe 10, uea 50)
    lam: float = 1.0
    uea_batch: int = 5
    uea_round_size: int = 3
    multi_target_strategy: str = "copy"  # "copy" | "joint"
    # aggregation / defense
    aggregator: str = "sum"
    norm_bound_tau: float = 1.0
    trim_fraction: float = -1.0         # < 0 -> use malicious_ratio
    f_count: int = -1                   # >= 0 -> absolute byzantine estimate
    robust_scale: str = "count"         # "count" | "representative"
    defense_enabled: bool = False
    beta: float = 0.5
    gamma: float = 0.5
    defense_mined_count: int = 10
    # evaluation / execution
    k: int = 10
    eval_every: int = 10
    seed: int = 0
    workers: int = 1

    def resolved_mined_count(self) -> int:
        if self.mined_count > 0:
            return self.mined_count
        return 50 if self.attack == "pieckuea" else 10

    def resolved_trim_fraction(self) -> float:
        return self.malicious_ratio if self.trim_fraction < 0 else self.trim_fraction

    def validate(self):
        if self.model_family not in ("mf", "dl"):
            raise ConfigError(f"model_family must be mf or dl, got {self.model_family!r}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if self.q <= 0:
            raise ConfigError("q must be > 0")
        if not 0.0 <= self.malicious_ratio < 1.0:
            raise ConfigError("malicious_ratio must lie in [0, 1)")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.rounds < 1 or self.round_batch < 1:
            raise ConfigError("rounds and round_batch must be positive")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError("lam must lie in (0, 1]")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.num_targets < 1:
            raise ConfigError("num_targets must be >= 1")
        if self.multi_target_strategy not in ("copy", "joint"):
            raise ConfigError("multi_target_strategy must be copy or joint")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    field = _FIELDS.get(name)
    if field is None:
        raise ConfigError(f"unknown config key: {name!r}")
    text = raw.strip()
    kind = field.type if isinstance(field.type, type) else type(field.default)
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            if not text:
                return ()
            return tuple(int(tok) for tok in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def load_config(path=None, overrides=None, use_env: bool = True) -> ExperimentConfig:
    """Assemble a validated config from a file and override layers."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[key] = _parse_value(key, raw)
        for key, raw in parser.items(parser.default_section):
            values[key] = _parse_value(key, raw)
    if use_env:
        for name in _FIELDS:
            raw = os.environ.get(ENV_PREFIX + name.upper())
            if raw is not None:
                values[name] = _parse_value(name, raw)
    if overrides:
        for key, val in overrides.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key: {key!r}")
            values[key] = _parse_value(key, val) if isinstance(val, str) else val
    return ExperimentConfig(**values).validate()
