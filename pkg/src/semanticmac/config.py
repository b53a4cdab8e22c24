"""Training configuration, dataset presets and ablation switches."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .contrastive import ContrastiveConfig
from .frontend import EncoderSpec
from .interaction import GBAConfig
from .labels import SCLGConfig
from .perceiver import PerceiverConfig


class ConfigError(ValueError):
    pass


def _default_encoders() -> Dict[str, EncoderSpec]:
    return {
        "text": EncoderSpec("text", 32, "synthetic_gaussian", frozen=True, max_tokens=12),
        "audio": EncoderSpec("audio", 16, "external_adapter", adapter="passthrough"),
        "vision": EncoderSpec("vision", 16, "external_adapter", adapter="passthrough"),
    }


@dataclass
class TextModelConfig:
    """Trainable stand-in for the fine-tuned language model."""

    layers: int = 1
    heads: int = 4
    ffn_mult: int = 2


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_language: float = 4e-5
    lr_other: float = 5e-4
    weight_decay: float = 5e-4
    scheduler: str = "constant"
    warmup_epochs: int = 1
    dropout: float = 0.1
    seed: int = 0
    grad_clip: Optional[float] = None
    frame_rate: float = 2.0
    max_frames: int = 256
    fixed_frames: Optional[int] = None
    # ablation switches
    multitask: bool = True
    use_pseudo_labels: bool = True
    track_train_metrics: bool = True
    dump_pseudo_labels: bool = False
    encoders: Dict[str, EncoderSpec] = field(default_factory=_default_encoders)
    text_model: TextModelConfig = field(default_factory=TextModelConfig)
    perceiver: PerceiverConfig = field(default_factory=PerceiverConfig)
    gba: GBAConfig = field(default_factory=GBAConfig)
    sclg: SCLGConfig = field(default_factory=SCLGConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.lr_language <= 0 or self.lr_other <= 0:
            raise ConfigError("learning rates must be positive")
        if self.scheduler not in ("constant", "cosine"):
            raise ConfigError(f"scheduler must be 'constant' or 'cosine', got {self.scheduler!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigError("epochs/warmup must be >= 0 and batch_size >= 1")
        if set(self.encoders) != {"text", "audio", "vision"}:
            raise ConfigError("encoders must cover text, audio and vision")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        try:
            return _build(cls, data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_NESTED = {
    "text_model": TextModelConfig,
    "perceiver": PerceiverConfig,
    "gba": GBAConfig,
    "sclg": SCLGConfig,
    "contrastive": ContrastiveConfig,
}


def _build(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if cls is TrainConfig and key in _NESTED:
            value = _build(_NESTED[key], value) if isinstance(value, dict) else value
        elif cls is TrainConfig and key == "encoders":
            defaults = _default_encoders()
            value = {
                mod: EncoderSpec(**{**dataclasses.asdict(defaults[mod]), **spec}) if isinstance(spec, dict) else spec
                for mod, spec in {**{m: {} for m in defaults}, **value}.items()
            }
        kwargs[key] = value
    return cls(**kwargs)


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


PRESET_NAMES = (
    "desk", "mosi", "mosei", "mosei_emotion", "chsims", "chsimsv2",
    "iemocap", "meld", "urfunny", "mustard",
)


def load_preset_dict(name_or_path: Union[str, Path]) -> dict:
    """Read a preset by file path, or by name from the bundled presets."""
    path = Path(name_or_path)
    if path.is_file():
        text = path.read_text()
    else:
        name = path.stem
        if name not in PRESET_NAMES:
            raise ConfigError(f"no preset file or bundled preset named {str(name_or_path)!r}")
        text = resources.files("semanticmac").joinpath("presets", f"{name}.json").read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name_or_path}: invalid JSON ({exc})") from exc
    data.pop("_source", None)
    return data


def load_config(name_or_path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None) -> TrainConfig:
    data = load_preset_dict(name_or_path) if name_or_path else {}
    if overrides:
        data = merge(data, overrides)
    return TrainConfig.from_dict(data)


# ablation name -> config override producing that ablation row
ABLATIONS: Dict[str, dict] = {
    "no_frame_embedding": {"perceiver": {"use_frame_embeddings": False}},
    "no_layer_norm": {"perceiver": {"use_layer_norm": False}},
    "no_residual": {"perceiver": {"use_residual": False}},
    "no_modality_embedding": {"gba": {"use_modality_embedding": False}},
    "no_multi_query": {"gba": {"multi_query": False}},
    "no_bridge": {"gba": {"use_bridge": False}},
    "no_gated_relu": {"gba": {"gate": "none"}},
    "no_momentum": {"sclg": {"momentum": False}},
    "gt_labels": {"use_pseudo_labels": False},
    "only_multimodal_task": {"multitask": False},
    "no_intra_cl": {"contrastive": {"use_intra": False}},
    "no_inter_cl": {"contrastive": {"use_inter": False}},
    "no_cl": {"contrastive": {"use_intra": False, "use_inter": False}},
}


def apply_ablation(config: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return TrainConfig.from_dict(merge(config.to_dict(), ABLATIONS[name]))


def parse_override(text: str) -> dict:
    """'gba.common_dim=32' -> {'gba': {'common_dim': 32}} (value parsed as JSON when possible)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out
