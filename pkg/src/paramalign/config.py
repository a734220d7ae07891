"""Run configuration loaded from YAML.

Sections and keys (all optional, unknown keys are rejected)::

    llm:        d_blocks, h, n_heads, h_ff, vocab, max_seq, init_std, head_std, norm_eps, dtype
    vision:     grid, alphabet, d_v, init_std
    generator:  h_p, N, k, r, n_heads_p, h_ff_p, init_std, norm_eps
    injection:  kinds (qkvom | qkvm | qkv | qko | qk)
    train:      steps, lr, warmup, batch_size, stage, n_train, n_eval, data_seed,
                blind, mode, log_every, weight_decay
    cost:       d_blocks, h, C, k, r, L_values

``llm.dtype`` sets the precision of every model component.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cost import CostParams
from .deltas import parse_kinds
from .generator import GeneratorConfig
from .llm import LlmConfig
from .train import TrainConfig
from .vision import VisionConfig


class ConfigError(ValueError):
    pass


@dataclass
class InjectionConfig:
    kinds: str = "qkvom"

    def __post_init__(self):
        parse_kinds(self.kinds)


@dataclass
class CostConfig:
    d_blocks: int = 32
    h: int = 4096
    C: int = 32
    k: int = 8
    r: int = 64
    L_values: list[int] = field(default_factory=lambda: [32, 256, 576, 2890, 8737])

    def params(self) -> CostParams:
        return CostParams(d_blocks=self.d_blocks, h=self.h, C=self.C, L=0, k=self.k, r=self.r)


@dataclass
class RunConfig:
    llm: LlmConfig = field(default_factory=LlmConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cost: CostConfig = field(default_factory=CostConfig)

    def __post_init__(self):
        self.vision.dtype = self.llm.dtype
        self.generator.dtype = self.llm.dtype
        if self.generator.k > self.llm.d_blocks or self.llm.d_blocks % self.generator.k:
            raise ConfigError(f"llm.d_blocks={self.llm.d_blocks} is not divisible by generator.k={self.generator.k}")
        if self.vision.alphabet + 1 > self.llm.vocab:
            raise ConfigError("llm.vocab must exceed vision.alphabet (captions use 1 + symbol ids)")
        if self.vision.n_cells + 1 > self.llm.max_seq:
            raise ConfigError("llm.max_seq too short for a full caption")

    @property
    def kinds(self):
        return parse_kinds(self.injection.kinds)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "llm": LlmConfig,
    "vision": VisionConfig,
    "generator": GeneratorConfig,
    "injection": InjectionConfig,
    "train": TrainConfig,
    "cost": CostConfig,
}


def from_dict(raw: dict | None, overrides: dict | None = None) -> RunConfig:
    """Build and validate a config; ``overrides`` maps ``section.key`` to values."""
    raw = {k: dict(v or {}) for k, v in (raw or {}).items()}
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = value
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    built = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        allowed = {f.name for f in dataclasses.fields(cls)}
        if name != "llm":
            allowed.discard("dtype")
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        try:
            built[name] = cls(**section)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}] {e}") from None
    try:
        return RunConfig(**built)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw, overrides)
