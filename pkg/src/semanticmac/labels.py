"""Semantic-centric pseudo-label generation.

Pseudo labels for the shared (S) and per-modality specific (T, A, V) subtasks
start at the ground truth and drift towards the ground truth of each sample's
nearest neighbours in feature space, one momentum step per epoch.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SUBTASKS = ("M", "S", "T", "A", "V")
PSEUDO_SUBTASKS = ("S", "T", "A", "V")
SUBTASK_MODALITY = {"T": "text", "A": "audio", "V": "vision"}


@dataclass
class SCLGConfig:
    neighbors: int = 5
    kernel_scale: float = 1.0
    start_epoch: int = 1
    # "mean" averages the three shared segments to d_c; "concat" keeps 3*d_c
    shared_feature: str = "mean"
    momentum: bool = True

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValueError("neighbors must be positive")
        if self.kernel_scale <= 0:
            raise ValueError("kernel_scale must be positive")
        if self.start_epoch < 1:
            raise ValueError("start_epoch must be >= 1")
        if self.shared_feature not in ("mean", "concat"):
            raise ValueError("shared_feature must be 'mean' or 'concat'")


def distance_matrix(features: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Distances to the k nearest other rows, RMS-scaled by the feature width.

    Returns (D, idx), both (B, k), sorted by ascending distance with ties
    broken by ascending row index. A row never counts as its own neighbour.
    """
    feats = np.asarray(features, dtype=np.float64)
    b, d = feats.shape
    if b < 2:
        raise ValueError("need at least two rows")
    if k >= b:
        raise ValueError(f"neighbors K={k} must be smaller than the batch size B={b}")
    diff = feats[:, None, :] - feats[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1) / d)
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps ascending index order among equal distances
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(dist, idx, axis=1), idx


def movement(distances: np.ndarray, neighbor_gts: np.ndarray, current: np.ndarray, kernel_scale: float) -> np.ndarray:
    """Kernel-weighted mean shift of one pseudo label towards its neighbours' ground truth."""
    distances = np.asarray(distances, dtype=np.float64)
    neighbor_gts = np.asarray(neighbor_gts, dtype=np.float64).reshape(len(distances), -1)
    weights = np.exp(-kernel_scale * distances)[:, None]
    return (weights * (neighbor_gts - np.asarray(current, dtype=np.float64))).mean(axis=0)


class PseudoLabelStore:
    """Per-subtask pseudo labels, indexed by sample id.

    ``labels[subtask]`` is an (N, r) float array; r = 1 for scores, the class
    count for (soft) class distributions.
    """

    def __init__(self, sample_ids: Sequence[str], ground_truth: np.ndarray, subtasks: Sequence[str] = PSEUDO_SUBTASKS):
        gt = np.asarray(ground_truth, dtype=np.float64)
        if gt.ndim == 1:
            gt = gt[:, None]
        if len(sample_ids) != len(gt):
            raise ValueError("one ground-truth row per sample id")
        self.sample_ids = list(sample_ids)
        self.index = {sid: i for i, sid in enumerate(self.sample_ids)}
        if len(self.index) != len(self.sample_ids):
            raise ValueError("sample ids must be unique")
        self.ground_truth = gt.copy()
        self.subtasks = tuple(subtasks)
        self.labels = {s: gt.copy() for s in self.subtasks}
        self.epoch = 0
        self._last_update = {s: np.zeros(len(gt), dtype=np.int64) for s in self.subtasks}
        # movements[subtask][epoch] -> (N, r), NaN where a sample was not updated
        self.movements: Dict[str, Dict[int, np.ndarray]] = {s: {} for s in self.subtasks}

    def rows(self, sample_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index[s] for s in sample_ids], dtype=np.int64)

    def get(self, subtask: str, sample_ids: Sequence[str]) -> np.ndarray:
        return self.labels[subtask][self.rows(sample_ids)]

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {s: v.copy() for s, v in self.labels.items()}

    def momentum_update(
        self,
        subtask: str,
        sample_id: str,
        delta: np.ndarray,
        epoch: int,
        start_epoch: int = 1,
        momentum: bool = True,
    ) -> np.ndarray:
        """Apply p <- p + delta / z for epochs past ``start_epoch``; earlier epochs keep p = y_gt.

        Without ``momentum`` the full movement is applied (p <- p + delta).
        """
        if epoch < 1:
            raise ValueError("epochs are numbered from 1")
        row = self.index[sample_id]
        if self._last_update[subtask][row] == epoch:
            raise RuntimeError(f"{subtask}/{sample_id} already updated in epoch {epoch}")
        self._last_update[subtask][row] = epoch
        self.epoch = max(self.epoch, epoch)
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        record = self.movements[subtask].setdefault(epoch, np.full_like(self.ground_truth, np.nan))
        record[row] = delta
        if epoch <= start_epoch:
            return self.labels[subtask][row]
        step = delta / epoch if momentum else delta
        self.labels[subtask][row] = self.labels[subtask][row] + step
        return self.labels[subtask][row]

    def copy(self) -> "PseudoLabelStore":
        return copy.deepcopy(self)

    def to_dict(self, class_names: Optional[Sequence[str]] = None) -> dict:
        """JSON-ready {"epoch": z, "subtasks": {subtask: {sample_id: payload}}}."""
        def payload(row: np.ndarray):
            if row.shape[0] == 1 and not class_names:
                return float(row[0])
            if class_names:
                return {c: float(v) for c, v in zip(class_names, row)}
            return [float(v) for v in row]

        return {
            "epoch": self.epoch,
            "subtasks": {
                s: {sid: payload(self.labels[s][i]) for i, sid in enumerate(self.sample_ids)}
                for s in self.subtasks
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping, ground_truth: Mapping[str, np.ndarray]) -> "PseudoLabelStore":
        ids = list(ground_truth)
        store = cls(ids, np.stack([np.atleast_1d(np.asarray(ground_truth[i], dtype=np.float64)) for i in ids]),
                    subtasks=tuple(data["subtasks"]))
        store.epoch = int(data["epoch"])
        for s, values in data["subtasks"].items():
            for sid, value in values.items():
                if isinstance(value, dict):
                    value = list(value.values())
                store.labels[s][store.index[sid]] = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return store

    def dumps(self, class_names: Optional[Sequence[str]] = None) -> str:
        return json.dumps(self.to_dict(class_names))


def label_batches(batches: Sequence[Sequence[str]], neighbors: int) -> List[List[str]]:
    """Fold batches too small for a K-neighbourhood into the previous batch."""
    out: List[List[str]] = []
    for batch in batches:
        batch = list(batch)
        if len(batch) <= neighbors and out:
            out[-1].extend(batch)
        else:
            out.append(batch)
    if len(out) > 1 and len(out[0]) <= neighbors:
        out[1] = out[0] + out[1]
        out.pop(0)
    return out


def subtask_features(specific: np.ndarray, shared: np.ndarray, shared_feature: str = "mean") -> Dict[str, np.ndarray]:
    """Map SGFI outputs (B, 3, d_c) to the per-subtask features used for k-NN."""
    feats = {
        "S": shared.mean(axis=1) if shared_feature == "mean" else shared.reshape(len(shared), -1),
    }
    for j, sub in enumerate(("T", "A", "V")):
        feats[sub] = specific[:, j]
    return feats


def generate_epoch_labels(
    features: Mapping[str, Mapping[str, np.ndarray]],
    store: PseudoLabelStore,
    config: SCLGConfig,
    epoch: int,
    batches: Optional[Sequence[Sequence[str]]] = None,
) -> PseudoLabelStore:
    """One epoch of label movement, computed batch by batch.

    ``features[subtask][sample_id]`` is that sample's (detached) feature vector.
    Every sample in ``batches`` receives exactly one update per subtask.
    """
    for subtask in store.subtasks:
        feats = features[subtask]
        groups = batches if batches is not None else [list(feats)]
        for batch in label_batches(groups, config.neighbors):
            if len(batch) < 2:
                continue
            mat = np.stack([np.asarray(feats[sid], dtype=np.float64) for sid in batch])
            dist, idx = distance_matrix(mat, config.neighbors)
            rows = store.rows(batch)
            gts = store.ground_truth[rows]
            current = store.labels[subtask][rows].copy()
            for i, sid in enumerate(batch):
                delta = movement(dist[i], gts[idx[i]], current[i], config.kernel_scale)
                store.momentum_update(subtask, sid, delta, epoch, config.start_epoch, config.momentum)
    return store
