"""Pipeline configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .adaptation import SelfTrainingConfig, TrainerConfig
from .dual import DualConfig, DualTrainConfig
from .vlm import VlmConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_clips: int = 2000
    split_fractions: dict = field(default_factory=lambda: {"adapt": 0.25, "corpus": 0.65, "test": 0.10})
    p_two_objects: float = 0.2
    p_two_actions: float = 0.5
    drop_rate: float = 0.5
    swap_rate: float = 0.3


@dataclass
class TokenizerConfig:
    vocab_size: int = 512


@dataclass
class AdaptConfig:
    n_frames: int = 8
    fps: float = 2.0
    # the base captioner is pretrained on clean frame sequences before adaptation
    pretrain_sequences: int = 4000
    pretrain: TrainerConfig = field(default_factory=lambda: TrainerConfig(epochs=12))
    stage1: TrainerConfig = field(default_factory=lambda: TrainerConfig(epochs=32))
    stage2: TrainerConfig = field(default_factory=lambda: TrainerConfig(epochs=10))
    self_training: SelfTrainingConfig = field(default_factory=SelfTrainingConfig)
    order: str = "visual-language"  # or "language-visual"

    def __post_init__(self):
        if self.order not in ("visual-language", "language-visual"):
            raise ConfigError(f"unknown adaptation order {self.order!r}")


@dataclass
class DecodingConfig:
    p: float = 0.9
    k: int = 4
    max_len: int = 24


@dataclass
class LlmConfig:
    endpoint: str = "mock"
    max_tokens: int = 128


@dataclass
class InstructionsConfig:
    preset: str = "+short-qa"
    pairs_per_clip: int = 1


@dataclass
class DualSection:
    model: DualConfig = field(default_factory=DualConfig)
    train: DualTrainConfig = field(default_factory=DualTrainConfig)
    caption_source: str = "pseudo"

    def __post_init__(self):
        if self.caption_source not in ("ground-truth", "alt-text", "pseudo"):
            raise ConfigError(f"unknown caption source {self.caption_source!r}")


@dataclass
class EvalConfig:
    probe_clips: int = 200
    wups_threshold: float = 0.9


@dataclass
class ScalingConfig:
    fractions: list = field(default_factory=lambda: [0.1, 0.3, 1.0])
    sources: list = field(default_factory=lambda: ["alt-text", "pseudo"])


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "out"
    precision: str = "float32"  # training dtype; gradient checks always run in float64
    world: WorldConfig = field(default_factory=WorldConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    vlm: VlmConfig = field(default_factory=VlmConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    instructions: InstructionsConfig = field(default_factory=InstructionsConfig)
    dual: DualSection = field(default_factory=DualSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(f'{path}{k}' for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = hints[key]
        kwargs[key] = _build(sub, value, f"{path}{key}.") if dataclasses.is_dataclass(sub) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def load_config(path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def merge(cfg: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Deep-merge ``overrides`` onto ``cfg`` with the same strict key checking."""

    def deep(base: dict, upd: dict) -> dict:
        out = dict(base)
        for k, v in upd.items():
            out[k] = deep(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
        return out

    return config_from_dict(deep(cfg.to_dict(), overrides))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def config_hash(cfg: PipelineConfig) -> str:
    """Hash of everything that affects outputs (the output directory does not)."""
    d = cfg.to_dict()
    d.pop("out")
    return digest(d)
