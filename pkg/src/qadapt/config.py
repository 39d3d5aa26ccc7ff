"""Run configuration: dataclasses, YAML I/O and dotted-path overrides."""
import copy
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .backbones import BackboneSpec, TextEncoderSpec
from .errors import ConfigError
from .focal import FocalConfig


@dataclass
class ExpertConfig:
    expert_id: str
    depth: int = 6
    split: Optional[int] = None  # default: inject before the last three blocks
    embed_dim: int = 64
    num_heads: int = 4
    patch_size: int = 32
    input_resolution: int = 224
    seed: int = 0
    weights: Optional[str] = None

    def spec(self) -> BackboneSpec:
        split = self.split if self.split is not None else max(1, self.depth - 3)
        return BackboneSpec(self.expert_id, self.depth, split, self.embed_dim, self.num_heads, self.patch_size,
                            self.input_resolution)

    @property
    def source(self):
        return self.weights if self.weights else self.seed


@dataclass
class TextConfig:
    vocab_size: int = 512
    depth: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    max_sequence_length: int = 32
    eot_token_id: Optional[int] = None  # default: vocab_size - 1
    seed: int = 100
    weights: Optional[str] = None

    def spec(self) -> TextEncoderSpec:
        eot = self.eot_token_id if self.eot_token_id is not None else self.vocab_size - 1
        return TextEncoderSpec(self.vocab_size, self.depth, self.embed_dim, self.num_heads,
                               self.max_sequence_length, eot)

    @property
    def source(self):
        return self.weights if self.weights else self.seed


def default_experts():
    return [
        ExpertConfig("A", depth=6, embed_dim=64, num_heads=4, patch_size=32, seed=1),
        ExpertConfig("B", depth=6, embed_dim=48, num_heads=4, patch_size=32, seed=2),
    ]


@dataclass
class AdaptationConfig:
    experts: List[ExpertConfig] = field(default_factory=default_experts)
    text: TextConfig = field(default_factory=TextConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    num_queries: int = 16
    alpha: float = 0.7
    fusion_dim: int = 64
    attn_heads: int = 4
    attn_inner_ratio: float = 0.25
    frozen_reduction: str = "cls"
    query_reduction: str = "mean"
    gate_source: str = "pooled"
    logit_scale: float = 1.0
    lambda_report: float = 1.0
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 3
    seed: int = 0
    data_fraction: float = 1.0
    grad_clip: Optional[float] = 1.0
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("at least one expert is required")
        ids = [e.expert_id for e in self.experts]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate expert ids {ids}")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lambda_report < 0 or self.logit_scale <= 0:
            raise ConfigError("lambda_report must be >= 0 and logit_scale > 0")
        for e in self.experts:
            e.spec()
            if e.input_resolution != self.focal.target_resolution:
                raise ConfigError(f"expert {e.expert_id} input resolution {e.input_resolution} "
                                  f"!= focal target resolution {self.focal.target_resolution}")
        self.text.spec()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = copy.deepcopy(dict(data))
        _reject_unknown(cls, data, "")
        if "experts" in data:
            experts = []
            for i, e in enumerate(data["experts"]):
                _reject_unknown(ExpertConfig, e, f"experts.{i}.")
                experts.append(_build(ExpertConfig, e))
            data["experts"] = experts
        if "text" in data:
            _reject_unknown(TextConfig, data["text"], "text.")
            data["text"] = _build(TextConfig, data["text"])
        if "focal" in data:
            _reject_unknown(FocalConfig, data["focal"], "focal.")
            data["focal"] = _build(FocalConfig, data["focal"])
        return _build(cls, data)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def effective_line(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return AdaptationConfig.from_dict(data)


def _build(cls, data):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _reject_unknown(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def load_config(path) -> AdaptationConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return AdaptationConfig.from_dict(data)


def save_config(config: AdaptationConfig, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")


def apply_overrides(config: AdaptationConfig, overrides) -> AdaptationConfig:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars."""
    data = config.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}") from exc
        node, parts = data, key.strip().split(".")
        for part in parts[:-1]:
            node = _step(node, part, key)
        last = parts[-1]
        if isinstance(node, list):
            node[_index(node, last, key)] = value
        elif isinstance(node, dict) and last in node:
            node[last] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return AdaptationConfig.from_dict(data)


def _index(node, part, key):
    try:
        i = int(part)
        node[i]
        return i
    except (ValueError, IndexError):
        raise ConfigError(f"bad list index in {key!r}") from None


def _step(node, part, key):
    if isinstance(node, list):
        return node[_index(node, part, key)]
    if isinstance(node, dict) and part in node and isinstance(node[part], (dict, list)):
        return node[part]
    raise ConfigError(f"unknown config key {key!r}")
