"""Experiment configuration: one JSON document with fixed sections.

Every key has a default; unknown keys are rejected with their full path so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from depthup.data import SpeechCodebookSpec, SyntheticTextSpec
from depthup.model import ModelConfig
from depthup.training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataSection:
    text: SyntheticTextSpec = SyntheticTextSpec()
    # transcripts are shorter than pretraining text so that speech fits the context
    asr_text: SyntheticTextSpec = SyntheticTextSpec(min_len=4, max_len=12)
    codebook: SpeechCodebookSpec = SpeechCodebookSpec()
    n_text_train: int = 20000
    n_text_eval: int = 200
    n_asr_train: int = 20000
    n_asr_eval: int = 100
    seed: int = 1


@dataclass(frozen=True)
class SurgerySection:
    strategy: str = "interleaved"
    m: int = 2
    kind: str = "standard"
    v_speech: int = 512
    seed: int = 7


@dataclass(frozen=True)
class LoraSection:
    rank: Any = "auto"  # int, or "auto" to match the depth up-scaling count
    alpha: Any = None  # None means 2 * rank
    seed: int = 9


@dataclass(frozen=True)
class EvalSection:
    preservation_trials: int = 10
    preservation_T: int = 16
    preservation_tol: float = 1e-5


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    data: DataSection = DataSection()
    pretrain: TrainConfig = TrainConfig(peak_lr=3e-3, warmup_steps=100, final_lr=3e-4, total_steps=1500, batch_size=16)
    surgery: SurgerySection = SurgerySection()
    adapt: TrainConfig = TrainConfig(peak_lr=3e-3, warmup_steps=100, final_lr=6e-4, total_steps=2000, batch_size=16)
    lora: LoraSection = LoraSection()
    eval: EvalSection = EvalSection()
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(raw).__name__}")
    default = cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(sub, "unknown key")
        current = getattr(default, key)
        if is_dataclass(current):
            kwargs[key] = _build(type(current), value, sub)
        elif isinstance(current, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**{**{f: getattr(default, f) for f in known}, **kwargs})
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from exc


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    rank = cfg.lora.rank
    if rank != "auto" and not (isinstance(rank, int) and rank >= 1):
        raise ConfigError("lora.rank", f"must be 'auto' or a positive integer, got {rank!r}")
    if cfg.model.vocab_speech != 0:
        raise ConfigError("model.vocab_speech", "the base model has no speech rows; set surgery.v_speech instead")
    if cfg.data.text.vocab_text != cfg.model.vocab_text or cfg.data.asr_text.vocab_text != cfg.model.vocab_text:
        raise ConfigError("data.text.vocab_text", "must equal model.vocab_text")
    cb = cfg.data.codebook
    if cb.vocab_text != cfg.model.vocab_text or cb.vocab_speech != cfg.surgery.v_speech:
        raise ConfigError("data.codebook", "vocab_text/vocab_speech must equal model.vocab_text/surgery.v_speech")
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(str(path), "config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    return from_dict(raw)
