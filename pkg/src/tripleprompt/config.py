"""Run configuration: one JSON document, validated before any compute."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data_protocol import SyntheticSpec
from .loss_opt import AslConfig, TrainConfig
from .prompt_context import CLASS_SPECIFIC, SHARED
from .spatial_head import HEAD_MODES, POS_ONLY, HeadConfig

CONTEXTLESS = "contextless"
RUN_MODES = HEAD_MODES + (CONTEXTLESS,)
PARTIAL = "partial"
ZERO_SHOT = "zero_shot"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    num_train: int = 500
    num_test: int = 200
    num_classes: int = 10
    height: int = 4
    width: int = 4
    feature_dim: int = 16
    noise_sigma: float = 0.1
    signal: float = 1.0
    min_planted: int = 1
    max_planted: int = 3
    confusion_pairs: list = field(default_factory=list)
    prototype_seed: int = 0
    image_seed: int = 1


@dataclass
class ModelSection:
    mode: str = "triple"
    prompt_layout: str = CLASS_SPECIFIC
    n_tokens: int = 12
    token_dim: int = 16
    text_dim: int = 16
    init_scale: float = 0.02
    world_seed: int = 0
    modality_gap: float = 0.6
    proj_bias_scale: float = 0.0
    wta_train: bool = True
    wta_eval: bool = False
    wta_gamma: float = 5.0
    tau: float = 0.01
    agg_sharpness: float = 1.0


@dataclass
class TrainSection:
    lr0: float = 0.002
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    margin: float = 0.05
    lr_schedule: str = "step"


@dataclass
class ProtocolSection:
    kind: str = PARTIAL
    keep_proportion: float = 0.5
    mask_seed: int = 0
    unseen_fraction: float = 0.25
    split_seed: int = 0


@dataclass
class EvalSection:
    topk: list = field(default_factory=lambda: [3, 5])
    threshold: float = 0.5


@dataclass
class CompareSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    tolerance: float = 0.01


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "protocol": ProtocolSection,
    "eval": EvalSection,
    "compare": CompareSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    eval: EvalSection = field(default_factory=EvalSection)
    compare: CompareSection = field(default_factory=CompareSection)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name: f for f in fields(section_cls)}
            bad = set(body) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            defaults = section_cls()
            values = {}
            for key, f in allowed.items():
                v = body.get(key, getattr(defaults, key))
                values[key] = _coerce(f"{name}.{key}", v, getattr(defaults, key))
            parts[name] = section_cls(**values)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = ()) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config is not valid JSON: {e}") from None
        raw = apply_overrides(raw, overrides)
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, updates: dict[str, Any]) -> "RunConfig":
        """Copy with ``{"section.key": value}`` updates applied."""
        raw = copy.deepcopy(self.to_dict())
        for key, value in updates.items():
            section, name = key.split(".", 1)
            raw[section][name] = value
        return RunConfig.from_dict(raw)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    # -- validation -------------------------------------------------------

    def validate(self):
        try:
            self.synthetic_spec(self.data.num_train + self.data.num_test)
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        d, m, p = self.data, self.model, self.protocol
        if d.num_train < 1 or d.num_test < 1:
            raise ConfigError("num_train and num_test must be >= 1")
        if m.mode not in RUN_MODES:
            raise ConfigError(f"model.mode must be one of {RUN_MODES}, got {m.mode!r}")
        if m.prompt_layout not in (CLASS_SPECIFIC, SHARED):
            raise ConfigError(f"model.prompt_layout must be {CLASS_SPECIFIC!r} or {SHARED!r}")
        if m.n_tokens < 1 or m.token_dim < 1 or m.text_dim < 1:
            raise ConfigError("n_tokens, token_dim and text_dim must be >= 1")
        if not m.init_scale > 0:
            raise ConfigError("model.init_scale must be > 0")
        if not 0 <= m.modality_gap <= math.pi / 2:
            raise ConfigError("model.modality_gap must lie in [0, pi/2]")
        if m.proj_bias_scale < 0:
            raise ConfigError("model.proj_bias_scale must be >= 0")
        if p.kind not in (PARTIAL, ZERO_SHOT):
            raise ConfigError(f"protocol.kind must be {PARTIAL!r} or {ZERO_SHOT!r}")
        if p.kind == PARTIAL and not 0 < p.keep_proportion <= 1:
            raise ConfigError("protocol.keep_proportion must lie in (0, 1]")
        if p.kind == ZERO_SHOT:
            if m.prompt_layout != SHARED:
                raise ConfigError("zero-shot protocol requires model.prompt_layout = 'shared'")
            if not 0 < p.unseen_fraction < 1:
                raise ConfigError("protocol.unseen_fraction must lie in (0, 1)")
            n_unseen = math.floor(p.unseen_fraction * d.num_classes + 0.5)
            if n_unseen in (0, d.num_classes):
                raise ConfigError("protocol.unseen_fraction leaves an empty seen or unseen side")
        ks = self.eval.topk
        if not all(isinstance(k, int) and k >= 1 for k in ks):
            raise ConfigError("eval.topk must be a list of positive integers")
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        if not self.compare.seeds or not all(isinstance(s, int) for s in self.compare.seeds):
            raise ConfigError("compare.seeds must be a non-empty list of integers")
        if self.compare.tolerance < 0:
            raise ConfigError("compare.tolerance must be >= 0")

    # -- derived objects --------------------------------------------------

    def synthetic_spec(self, num_images: int | None = None) -> SyntheticSpec:
        d = self.data
        n = d.num_train + d.num_test if num_images is None else num_images
        return SyntheticSpec(
            num_images=n, num_classes=d.num_classes, height=d.height, width=d.width,
            feature_dim=d.feature_dim, prototype_seed=d.prototype_seed, image_seed=d.image_seed,
            noise_sigma=d.noise_sigma, signal=d.signal, min_planted=d.min_planted,
            max_planted=d.max_planted, confusion_pairs=tuple(tuple(p) for p in d.confusion_pairs),
        )

    @property
    def head_mode(self) -> str:
        return POS_ONLY if self.model.mode == CONTEXTLESS else self.model.mode

    def head_config(self, training: bool) -> HeadConfig:
        m = self.model
        return HeadConfig(mode=self.head_mode, wta=m.wta_train if training else m.wta_eval,
                          gamma=m.wta_gamma, tau=m.tau, sharpness=m.agg_sharpness)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr0=t.lr0, epochs=t.epochs, batch_size=t.batch_size, seed=t.seed,
            asl=AslConfig(t.gamma_pos, t.gamma_neg, t.margin),
            head=self.head_config(training=True), lr_schedule=t.lr_schedule,
        )


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Type-check a value against the default's type (ints accepted as floats)."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        if not math.isfinite(value):
            raise ConfigError(f"{key} must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return copy.deepcopy(value)
    return value


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides; values parse as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, text = item.split("=", 1)
        if key.count(".") != 1:
            raise ConfigError(f"override key {key!r} must look like section.key")
        section, name = key.split(".")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"section {section!r} must be an object")
        raw[section][name] = value
    return raw


def config_hash(d: dict) -> str:
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
