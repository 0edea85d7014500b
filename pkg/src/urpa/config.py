"""Experiment configuration: TOML files with dotted keys and an ``include`` key.

A config file may name one base file through ``include = "base.toml"``; keys
in the including file override the base. Every key must be known, and the
resolved config is cross-checked before any compute starts.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from urpa.adaptation import AdaptConfig
from urpa.envgen import DomainSpec
from urpa.grpo import GrpoConfig
from urpa.rewards import RewardConfig


class ConfigError(ValueError):
    pass


def _default_target() -> DomainSpec:
    # longer events than the source plus a systematic labelling offset
    return DomainSpec(duration_shape_a=2.0, duration_shape_b=2.0, annotation_bias=0.05)


@dataclass(frozen=True)
class ExperimentConfig:
    source: DomainSpec = field(default_factory=DomainSpec)
    target: DomainSpec = field(default_factory=_default_target)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    seed: int = 0
    n_source: int = 4000
    n_target_pool: int = 2000
    eval_set_size: int = 500
    source_steps: int = 1000
    theorem_samples: int = 50
    theorem_G: tuple = (8, 64, 512)
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        self.source.validate()
        self.target.validate()
        if self.source.profile_length != self.target.profile_length or self.source.embed_dim != self.target.embed_dim:
            raise ConfigError("source and target must share profile_length and embed_dim")
        for name in ("n_source", "n_target_pool", "eval_set_size", "source_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.adapt.k_shots > self.n_target_pool:
            raise ConfigError(f"k_shots={self.adapt.k_shots} exceeds the target pool of {self.n_target_pool}")
        if self.adapt.k_shots * 10 > self.n_target_pool:
            raise ConfigError(f"k_shots={self.adapt.k_shots} is not few-shot for a pool of {self.n_target_pool} (need K <= N/10)")
        if self.theorem_samples < 0 or any(int(g) < 2 for g in self.theorem_G):
            raise ConfigError("theorem_G entries must be >= 2 and theorem_samples >= 0")
        if self.theorem_samples > self.eval_set_size:
            raise ConfigError("theorem_samples cannot exceed eval_set_size")
        return self

    @property
    def pseudo_group_size(self) -> int:
        return self.adapt.pseudo_group_size or self.grpo.group_size

    def adapt_grpo(self) -> GrpoConfig:
        """GRPO settings for adaptation; the experiment seed drives all streams."""
        return replace(self.grpo, seed=self.seed)

    def source_grpo(self) -> GrpoConfig:
        epochs = math.ceil(self.source_steps * self.grpo.batch_size / self.n_source)
        return replace(self.grpo, seed=self.seed, epochs=max(epochs, 1), max_steps=self.source_steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theorem_G"] = list(self.theorem_G)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Flat overrides such as ``seed=3`` or ``adapt.gamma=5``."""
        return from_dict(_merge(self.to_dict(), _nest(kw))).validate()


_SECTIONS = {"source": DomainSpec, "target": DomainSpec, "grpo": GrpoConfig, "adapt": AdaptConfig, "reward": RewardConfig}


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, value in flat.items():
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name} must be a table")
        kwargs[name] = _build(cls, section, name)
    if "theorem_G" in data:
        data["theorem_G"] = tuple(int(g) for g in data["theorem_G"])
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs.update(data)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _read(path: Path, seen: tuple) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    inc = data.pop("include", None)
    if inc is None:
        return data
    if not isinstance(inc, str):
        raise ConfigError("include must be a single path string")
    base = _read(path.parent / inc, seen + (path,))
    return _merge(base, data)


def load_config(path) -> ExperimentConfig:
    return from_dict(_read(Path(path), ())).validate()


def default_config() -> ExperimentConfig:
    return ExperimentConfig().validate()
