"""Run configuration: nested dataclasses, JSON (de)serialization and dotted-path overrides.

Defaults reproduce the QVHighlights training setup (batch 64, 150 epochs, lr 1e-4,
3 dummies, 4 phrases, 2/3/2/2/2 layers, loss weights 5/1/1, r_DQA 0.3).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data_io import SyntheticSpec
from .objectives import LossWeights

TOKEN_CONDITIONS = ("full", "word_only", "eos_only")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class LayerCounts:
    d_enc: int = 2
    aca: int = 3
    p_sa: int = 2
    p_enc: int = 2
    s_enc: int = 2


@dataclass
class ModelConfig:
    d: int = 256
    L_d: int = 3
    N: int = 4
    heads: int = 8
    layers: LayerCounts = field(default_factory=LayerCounts)
    pyramid_levels: int = 4
    fusion: str = "add"
    dropout: float = 0.1
    input_dim: typing.Optional[int] = None
    max_clips: int = 512
    max_words: int = 64
    level_base: float = 8.0
    token_condition: str = "full"


@dataclass
class OptimConfig:
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 150
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    max_steps: typing.Optional[int] = None
    lr_schedule: str = "constant"
    warmup_steps: int = 0


@dataclass
class EvalConfig:
    iou_thresholds: list = field(default_factory=lambda: [0.5, 0.7])
    map_thresholds: list = field(default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(10)])
    nms_threshold: float = 0.7
    top_k: int = 10
    every_epochs: int = 1


@dataclass
class DataConfig:
    archive_root: typing.Optional[str] = None
    val_archive_root: typing.Optional[str] = None
    val_fraction: float = 0.1
    synthetic: typing.Optional[SyntheticSpec] = field(default_factory=SyntheticSpec)
    val_samples: int = 100


@dataclass
class AnalysisConfig:
    # "train": one model trained per token condition; "eval": one model, masking applied at evaluation only
    token_condition_phase: str = "train"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def model_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self.model), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def validate(self):
        m = self.model
        if m.d <= 0 or m.d % m.heads:
            raise ConfigError("model.d", f"{m.d} must be positive and divisible by model.heads={m.heads}")
        if m.N < 1:
            raise ConfigError("model.N", "need at least one phrase")
        if m.L_d < 0:
            raise ConfigError("model.L_d", "must be >= 0")
        if m.pyramid_levels < 1:
            raise ConfigError("model.pyramid_levels", "must be >= 1")
        if m.fusion not in ("add", "hadamard", "gate", "concat_mlp"):
            raise ConfigError("model.fusion", f"unknown strategy {m.fusion!r}")
        if m.token_condition not in TOKEN_CONDITIONS:
            raise ConfigError("model.token_condition", f"must be one of {TOKEN_CONDITIONS}")
        for name, value in dataclasses.asdict(m.layers).items():
            if value < 0:
                raise ConfigError(f"model.layers.{name}", "must be >= 0")
        o = self.optim
        if o.lr <= 0:
            raise ConfigError("optim.lr", "must be positive")
        if o.batch_size < 1:
            raise ConfigError("optim.batch_size", "must be >= 1")
        if o.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("optim.lr_schedule", "must be 'constant' or 'cosine'")
        for f in dataclasses.fields(self.loss):
            if getattr(self.loss, f.name) <= 0:
                raise ConfigError(f"loss.{f.name}", "must be positive")
        if not 0 < self.eval.nms_threshold <= 1:
            raise ConfigError("eval.nms_threshold", "must lie in (0, 1]")
        if self.data.archive_root is None and self.data.synthetic is None:
            raise ConfigError("data", "set either data.archive_root or data.synthetic")
        if self.data.synthetic is not None:
            try:
                self.data.synthetic.validate()
            except ValueError as e:
                raise ConfigError("data.synthetic", str(e)) from None
        if self.analysis.token_condition_phase not in ("train", "eval"):
            raise ConfigError("analysis.token_condition_phase", "must be 'train' or 'eval'")
        return self


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path}.{key}".lstrip("."), "unknown field")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}".lstrip(".")
        hint = hints[name]
        target = hint
        if typing.get_origin(hint) is typing.Union:
            args = [a for a in typing.get_args(hint) if a is not type(None)]
            if value is None:
                kwargs[name] = None
                continue
            target = args[0]
        if dataclasses.is_dataclass(target):
            kwargs[name] = _build(target, value, sub)
        elif target is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        elif target in (int, str, bool) and not isinstance(value, target):
            raise ConfigError(sub, f"expected {target.__name__}, got {value!r}")
        elif target is int and isinstance(value, bool):
            raise ConfigError(sub, f"expected int, got {value!r}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Applies ``key.sub=value`` strings; values are parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for i, part in enumerate(parts[:-1]):
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigError(".".join(parts[: i + 1]), "is not an object")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    data = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON: {e}") from None
        _merge(data, user)
    apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)


def _merge(base: dict, update: dict):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
