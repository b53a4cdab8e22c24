"""Full network: text model, perceivers, SGFI and the five subtask heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .interaction import MODALITY_ORDER, SemanticInteraction, SemanticRepresentations
from .labels import SUBTASKS
from .perceiver import AffectivePerceiver


@dataclass(frozen=True)
class TaskKind:
    kind: str = "regression"
    num_classes: int = 1
    multilabel: bool = False

    def __post_init__(self):
        if self.kind not in ("regression", "classification", "detection"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "detection" and self.num_classes != 2:
            raise ValueError("detection is binary")
        if self.kind == "classification" and self.num_classes < 2:
            raise ValueError("classification needs at least two classes")

    @property
    def output_dim(self) -> int:
        return 1 if self.kind == "regression" else self.num_classes

    @classmethod
    def from_manifest(cls, manifest) -> "TaskKind":
        if manifest.task_kind == "regression":
            return cls()
        return cls(manifest.task_kind, len(manifest.class_names or []), manifest.multilabel)


def encode_label(label, task: TaskKind, class_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Numeric target: [score] for regression, one-/multi-hot over classes otherwise."""
    if task.kind == "regression":
        return np.array([float(label)])
    vec = np.zeros(task.num_classes)
    names = (label,) if isinstance(label, str) else tuple(label)
    for name in names:
        vec[list(class_names).index(name)] = 1.0
    return vec


def decode_prediction(output: np.ndarray, task: TaskKind, class_names: Sequence[str]):
    """Map a head output row to a score, a class name, or a class-name tuple."""
    if task.kind == "regression":
        return float(output[0])
    if task.multilabel:
        probs = np.exp(output - output.max())
        probs /= probs.sum()
        chosen = [c for c, p in zip(class_names, probs) if p > 1.0 / len(class_names)]
        return tuple(chosen or [class_names[int(np.argmax(output))]])
    return class_names[int(np.argmax(output))]


HEAD_INPUT_MULTIPLIER = {"M": 6, "S": 3, "T": 1, "A": 1, "V": 1}


class PredictorHead(nn.Module):
    """Two-layer MLP, hidden width half the input."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float = 0.0):
        super().__init__()
        hidden = max(in_dim // 2, 1)
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def predict(head: PredictorHead, features: torch.Tensor) -> torch.Tensor:
    return head(features)


def task_loss(pred: torch.Tensor, target: torch.Tensor, task: TaskKind) -> torch.Tensor:
    """Mean squared error for scores; soft-target cross-entropy for classes."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if task.kind == "regression":
        return F.mse_loss(pred, target)
    return -(target * F.log_softmax(pred, dim=-1)).sum(-1).mean()


def total_loss(task_losses: Mapping[str, torch.Tensor], cl_loss) -> torch.Tensor:
    """Contrastive term plus the unweighted sum of subtask losses."""
    total = cl_loss
    for sub in SUBTASKS:
        if sub in task_losses:
            total = total + task_losses[sub]
    return total


class TextModel(nn.Module):
    """Small trainable encoder over the frozen token embeddings."""

    def __init__(self, dim: int, layers: int, heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(dim, heads, ffn_mult * dim, dropout, batch_first=True, norm_first=True)
            for _ in range(layers)
        )

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = tokens
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=~mask)
        return x


@dataclass
class ModelOutput:
    reps: SemanticRepresentations
    preds: Dict[str, torch.Tensor]

    @property
    def fused(self) -> torch.Tensor:
        return self.reps.fused

    def subtask_input(self, sub: str) -> torch.Tensor:
        if sub == "M":
            return self.reps.fused
        if sub == "S":
            return self.reps.shared_concat
        return self.reps.specific[:, "TAV".index(sub)]


class SemanticMAC(nn.Module):
    def __init__(self, config: TrainConfig, task: TaskKind):
        super().__init__()
        self.config = config
        self.task = task
        enc = config.encoders
        dims = {u: enc[u].output_dim for u in MODALITY_ORDER}
        tm = config.text_model
        self.text_model = TextModel(dims["text"], tm.layers, tm.heads, tm.ffn_mult, config.dropout)
        pc = config.perceiver
        shared_fr = None
        if pc.share_frame_embeddings:
            if dims["audio"] != dims["vision"]:
                raise ValueError("shared frame embeddings need equal audio/vision widths")
            shared_fr = nn.Parameter(torch.randn(pc.max_frames, dims["audio"]) * pc.init_std)
        self.perceiver = nn.ModuleDict({
            u: AffectivePerceiver(dims[u], pc, shared_fr) for u in ("audio", "vision")
        })
        self.sgfi = SemanticInteraction(dims, config.gba)
        d_c = config.gba.common_dim
        self.heads = nn.ModuleDict({
            sub: PredictorHead(HEAD_INPUT_MULTIPLIER[sub] * d_c, task.output_dim, config.dropout) for sub in SUBTASKS
        })

    def language_parameters(self) -> List[nn.Parameter]:
        return list(self.text_model.parameters())

    def other_parameters(self) -> List[nn.Parameter]:
        lang = {id(p) for p in self.language_parameters()}
        return [p for p in self.parameters() if id(p) not in lang]

    def forward(self, batch: Mapping[str, torch.Tensor], drop: Sequence[str] = ()) -> ModelOutput:
        features = {
            "text": self.text_model(batch["text"], batch["text_mask"]),
            "audio": self.perceiver["audio"](batch["audio"], batch["audio_mask"]),
            "vision": self.perceiver["vision"](batch["vision"], batch["vision_mask"]),
        }
        reps = self.sgfi(features, {"text": batch["text_mask"]}, drop)
        out = ModelOutput(reps, {})
        for sub in SUBTASKS:
            out.preds[sub] = self.heads[sub](out.subtask_input(sub))
        return out
