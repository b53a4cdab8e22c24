"""Small configurations that keep training-based tests fast."""

from semanticmac.config import TrainConfig, load_config, merge
from semanticmac.frontend import synthesize_dataset

TINY = {
    "epochs": 3,
    "batch_size": 16,
    "encoders": {"text": {"output_dim": 8, "max_tokens": 8}, "audio": {"output_dim": 8}, "vision": {"output_dim": 8}},
    "text_model": {"heads": 2},
    "perceiver": {"n_tokens": 4, "depth": 1, "heads": 2, "max_frames": 64},
    "gba": {"common_dim": 8, "heads": 2, "bridge_tokens": 2},
    "sclg": {"neighbors": 3},
}


def tiny_config(**overrides) -> TrainConfig:
    return load_config("desk", merge(TINY, overrides))


def tiny_data(samples=48, seed=0, **kw):
    return synthesize_dataset(samples=samples, seed=seed, audio_dim=8, vision_dim=8, **kw)
