"""Multi-task training loop, evaluation and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .config import TrainConfig
from .contrastive import assign_contrastive_class, positive_mask, sccl_loss
from .frontend import DatasetManifest, UtteranceSample, encode_modality, prepare_frames
from .labels import PSEUDO_SUBTASKS, SUBTASKS, PseudoLabelStore, generate_epoch_labels, subtask_features
from .metrics import classification_metrics, regression_metrics
from .model import SemanticMAC, TaskKind, decode_prediction, encode_label, task_loss, total_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``checkpoint`` holds the last finite state."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# encoded data


@dataclass
class EncodedSplit:
    sample_ids: List[str]
    labels: list
    targets: np.ndarray  # (N, r)
    text: List[np.ndarray]
    text_mask: List[np.ndarray]
    audio: List[np.ndarray]
    vision: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.sample_ids)


def encode_samples(
    samples: Sequence[UtteranceSample],
    config: TrainConfig,
    task: TaskKind,
    class_names: Optional[Sequence[str]] = None,
    fixed_frames: Optional[int] = None,
) -> EncodedSplit:
    """Frame sampling plus frozen encoders, once per sample."""
    fixed = config.fixed_frames if fixed_frames is None else fixed_frames
    out = EncodedSplit([], [], np.zeros((0, task.output_dim)), [], [], [], [])
    targets = []
    for s in samples:
        prepared = copy.copy(s)
        prepared.audio_frames = prepare_frames(s.audio_frames, s.audio_times, s.duration_s,
                                               config.frame_rate, config.max_frames, fixed)
        prepared.vision_frames = prepare_frames(s.vision_frames, s.vision_times, s.duration_s,
                                                config.frame_rate, config.max_frames, fixed)
        text = encode_modality(prepared, config.encoders["text"], class_names)
        out.sample_ids.append(s.sample_id)
        out.labels.append(s.label)
        targets.append(encode_label(s.label, task, class_names))
        out.text.append(text.tokens)
        out.text_mask.append(text.mask)
        out.audio.append(encode_modality(prepared, config.encoders["audio"], class_names).tokens)
        out.vision.append(encode_modality(prepared, config.encoders["vision"], class_names).tokens)
    if targets:
        out.targets = np.stack(targets)
    return out


def _pad(mats: List[np.ndarray]):
    longest = max(len(m) for m in mats)
    dim = mats[0].shape[1]
    x = np.zeros((len(mats), longest, dim), dtype=np.float32)
    mask = np.zeros((len(mats), longest), dtype=bool)
    for i, m in enumerate(mats):
        x[i, : len(m)] = m
        mask[i, : len(m)] = True
    return torch.from_numpy(x), torch.from_numpy(mask)


def collate(data: EncodedSplit, rows: Sequence[int]) -> Dict[str, torch.Tensor]:
    audio, audio_mask = _pad([data.audio[i] for i in rows])
    vision, vision_mask = _pad([data.vision[i] for i in rows])
    return {
        "text": torch.from_numpy(np.stack([data.text[i] for i in rows])),
        "text_mask": torch.from_numpy(np.stack([data.text_mask[i] for i in rows])),
        "audio": audio,
        "audio_mask": audio_mask,
        "vision": vision,
        "vision_mask": vision_mask,
        "targets": torch.from_numpy(data.targets[list(rows)]).float(),
    }


def batch_rows(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> List[List[int]]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i: i + batch_size].tolist() for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    state_dict: Dict[str, torch.Tensor]
    config: TrainConfig
    task: TaskKind
    class_names: Optional[List[str]]
    store: Optional[dict] = None
    epoch: int = 0

    def build_model(self) -> SemanticMAC:
        model = SemanticMAC(self.config, self.task)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: Union[str, Path]) -> Path:
        """One safetensors file; config, task and pseudo-label store ride in the metadata."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().contiguous().clone() for k, v in self.state_dict.items()}
        meta = {
            "config": json.dumps(self.config.to_dict()),
            "task": json.dumps({"kind": self.task.kind, "num_classes": self.task.num_classes,
                                "multilabel": self.task.multilabel}),
            "class_names": json.dumps(self.class_names),
            "store": json.dumps(self.store),
            "epoch": str(self.epoch),
        }
        save_file(tensors, str(path), metadata=meta)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata()
        return cls(
            state_dict=load_file(str(path)),
            config=TrainConfig.from_dict(json.loads(meta["config"])),
            task=TaskKind(**json.loads(meta["task"])),
            class_names=json.loads(meta["class_names"]),
            store=json.loads(meta["store"]),
            epoch=int(meta["epoch"]),
        )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Inference:
    sample_ids: List[str]
    preds: Dict[str, np.ndarray]
    specific: np.ndarray
    shared: np.ndarray
    fused: np.ndarray


@torch.no_grad()
def run_inference(model: SemanticMAC, data: EncodedSplit, batches: Sequence[Sequence[int]],
                  drop: Sequence[str] = ()) -> Inference:
    was_training = model.training
    model.eval()
    preds = {s: [] for s in SUBTASKS}
    specific, shared, fused, ids = [], [], [], []
    for rows in batches:
        out = model(collate(data, rows), drop)
        for s in SUBTASKS:
            preds[s].append(out.preds[s].double().numpy())
        specific.append(out.reps.specific.double().numpy())
        shared.append(out.reps.shared.double().numpy())
        fused.append(out.fused.double().numpy())
        ids.extend(data.sample_ids[i] for i in rows)
    model.train(was_training)
    cat = np.concatenate
    return Inference(ids, {s: cat(v) for s, v in preds.items()}, cat(specific), cat(shared), cat(fused))


def metric_report(preds: np.ndarray, labels: Sequence, task: TaskKind,
                  class_names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    if task.kind == "regression":
        return regression_metrics(preds[:, 0], [float(y) for y in labels], strict_corr=False)
    decoded = [decode_prediction(row, task, class_names) for row in preds]
    return classification_metrics(decoded, list(labels), class_names, multilabel=task.multilabel)


def _m_loss(inf: Inference, data: EncodedSplit, task: TaskKind) -> float:
    pred = torch.from_numpy(inf.preds["M"])
    order = [data.sample_ids.index(s) for s in inf.sample_ids] if inf.sample_ids != data.sample_ids else None
    target = torch.from_numpy(data.targets if order is None else data.targets[order])
    return float(task_loss(pred, target, task))


def evaluate(
    checkpoint: Union[Checkpoint, str, Path],
    manifest: DatasetManifest,
    split: str = "test",
    batch_size: int = 64,
    fixed_frames: Optional[int] = None,
) -> Dict[str, float]:
    """Deterministic inference pass over one split; returns the metric report plus loss."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    model = checkpoint.build_model()
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    data = encode_samples(samples, checkpoint.config, checkpoint.task, checkpoint.class_names, fixed_frames)
    inf = run_inference(model, data, batch_rows(len(data), batch_size))
    report = metric_report(inf.preds["M"], data.labels, checkpoint.task, checkpoint.class_names)
    report["loss"] = _m_loss(inf, data, checkpoint.task)
    return report


def average_reports(reports: Sequence[Dict[str, float]]) -> Dict[str, float]:
    keys = reports[0].keys()
    return {k: float(np.mean([r[k] for r in reports])) for k in keys}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    last_checkpoint: Checkpoint
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    store: Optional[PseudoLabelStore] = None
    group_lrs: List[Dict[str, float]] = field(default_factory=list)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def lr_factor(step: int, warmup_steps: int, total_steps: int, scheduler: str) -> float:
    """Linear warmup from 0, then constant or cosine decay to 0."""
    if warmup_steps and step < warmup_steps:
        return (step + 1) / warmup_steps
    if scheduler == "constant":
        return 1.0
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _contrastive_tags(labels, task: TaskKind, threshold: float):
    return [assign_contrastive_class(y, task.kind, threshold) for y in labels]


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Train on the ``train`` split; select by validation loss (scores) or w-F1 (classes)."""
    seed_everything(config.seed)
    task = TaskKind.from_manifest(manifest)
    class_names = manifest.class_names
    train_samples = manifest.split("train")
    valid_samples = manifest.split("valid")
    if not train_samples:
        raise ValueError("manifest has no training samples")
    train_data = encode_samples(train_samples, config, task, class_names)
    valid_data = encode_samples(valid_samples, config, task, class_names) if valid_samples else None
    train_tags = _contrastive_tags(train_data.labels, task, config.contrastive.sentiment_threshold)

    model = SemanticMAC(config, task)
    store = PseudoLabelStore(train_data.sample_ids, train_data.targets)
    lang, other = model.language_parameters(), model.other_parameters()
    optimizer = torch.optim.AdamW(
        [
            {"params": lang, "lr": config.lr_language, "name": "language"},
            {"params": other, "lr": config.lr_other, "name": "other"},
        ],
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(train_data) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = steps_per_epoch * config.warmup_epochs
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_factor(s, warmup_steps, total_steps, config.scheduler)
    )

    def snapshot_checkpoint(epoch: int) -> Checkpoint:
        return Checkpoint(
            {k: v.detach().clone() for k, v in model.state_dict().items()},
            config, task, class_names, store.to_dict(), epoch,
        )

    best = snapshot_checkpoint(0)
    result = TrainResult(best, best, store=store)
    if config.epochs == 0:
        return result
    best_score = -math.inf
    out_path = Path(out_dir) if out_dir else None
    subtasks = SUBTASKS if config.multitask else ("M",)
    rng = np.random.default_rng(config.seed)

    for epoch in range(1, config.epochs + 1):
        model.train()
        batches = batch_rows(len(train_data), config.batch_size, rng)
        pseudo = store.snapshot()  # all batches of this epoch read one store version
        sums: Dict[str, float] = {}
        last_finite = snapshot_checkpoint(epoch - 1)
        for rows in batches:
            batch = collate(train_data, rows)
            out = model(batch)
            losses = {}
            for sub in subtasks:
                if sub == "M" or not config.use_pseudo_labels:
                    target = batch["targets"]
                else:
                    target = torch.from_numpy(pseudo[sub][rows]).float()
                losses[sub] = task_loss(out.preds[sub], target, task)
            tags = [train_tags[i] for i in rows]
            cl = sccl_loss(out.reps.specific, out.reps.shared, out.fused, tags, config.contrastive)
            loss = total_loss(losses, cl)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", last_finite)
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()
            w = len(rows) / len(train_data)
            sums["train_loss"] = sums.get("train_loss", 0.0) + w * loss.item()
            sums["train_cl"] = sums.get("train_cl", 0.0) + w * float(cl.detach())
            for sub, value in losses.items():
                sums[f"train_{sub}"] = sums.get(f"train_{sub}", 0.0) + w * value.item()
        result.group_lrs.append({g["name"]: g["lr"] for g in optimizer.param_groups})

        # end-of-epoch no-grad pass: refresh pseudo labels, collect train metrics
        inf = run_inference(model, train_data, batches)
        if config.use_pseudo_labels and config.multitask:
            feats = subtask_features(inf.specific, inf.shared, config.sclg.shared_feature)
            per_sample = {s: dict(zip(inf.sample_ids, feats[s])) for s in PSEUDO_SUBTASKS}
            generate_epoch_labels(per_sample, store, config.sclg, epoch,
                                  [[train_data.sample_ids[i] for i in rows] for rows in batches])
        record = {"epoch": float(epoch), **sums}
        if config.track_train_metrics:
            order = [train_data.sample_ids.index(s) for s in inf.sample_ids]
            labels = [train_data.labels[i] for i in order]
            for k, v in metric_report(inf.preds["M"], labels, task, class_names).items():
                record[f"train_{k}"] = v
        if valid_data is not None and len(valid_data):
            vinf = run_inference(model, valid_data, batch_rows(len(valid_data), 64))
            record["valid_loss"] = _m_loss(vinf, valid_data, task)
            for k, v in metric_report(vinf.preds["M"], valid_data.labels, task, class_names).items():
                record[f"valid_{k}"] = v
            score = -record["valid_loss"] if task.kind == "regression" else record["valid_w-F1"]
        else:
            score = -record["train_loss"]
        if score > best_score:
            best_score = score
            result.best_epoch = epoch
            result.checkpoint = snapshot_checkpoint(epoch)
        result.history.append(record)
        if out_path and config.dump_pseudo_labels:
            out_path.mkdir(parents=True, exist_ok=True)
            (out_path / f"pseudo_labels_epoch{epoch:03d}.json").write_text(
                json.dumps(store.to_dict(class_names))
            )
        if on_epoch:
            on_epoch(record)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in record.items()})

    result.last_checkpoint = snapshot_checkpoint(config.epochs)
    return result
