"""End-to-end semantic-centric multimodal affective computing at desk scale."""

from .config import ABLATIONS, TrainConfig, apply_ablation, load_config
from .frontend import DatasetManifest, EncoderSpec, UtteranceSample, load_manifest, save_manifest, synthesize_dataset
from .model import SemanticMAC, TaskKind
from .training import Checkpoint, evaluate, train

__all__ = [
    "ABLATIONS",
    "Checkpoint",
    "DatasetManifest",
    "EncoderSpec",
    "SemanticMAC",
    "TaskKind",
    "TrainConfig",
    "UtteranceSample",
    "apply_ablation",
    "evaluate",
    "load_config",
    "load_manifest",
    "save_manifest",
    "synthesize_dataset",
    "train",
]
