"""Distribution-level precision/recall curves between representation sets.

Both sets are clustered jointly; the per-cluster histograms P and Q are then
compared along a sweep of slopes lambda = tan(theta).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from .frontend import DatasetManifest
from .interaction import MODALITY_ORDER

# angles stay strictly inside (0, pi/2)
_EPS = 1e-10


@dataclass
class PRCurve:
    lambdas: np.ndarray
    alpha: np.ndarray  # precision
    beta: np.ndarray  # recall
    num_bins: int = 10
    seed: int = 0

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.alpha, self.beta], axis=1)

    def max_min(self) -> float:
        """Largest min(alpha, beta) on the grid; 1 for identical distributions."""
        return float(np.max(np.minimum(self.alpha, self.beta)))

    def area(self) -> float:
        """Area under precision as a function of recall, anchored at (0, a0) and (b_end, 0)."""
        order = np.argsort(self.beta, kind="stable")
        b = np.concatenate([[0.0], self.beta[order]])
        a = np.concatenate([[self.alpha[order][0]], self.alpha[order]])
        return float(np.sum(0.5 * (a[1:] + a[:-1]) * np.diff(b)))

    def to_csv(self) -> str:
        lines = ["lambda,alpha,beta"]
        lines += [f"{l:.10g},{a:.10g},{b:.10g}" for l, a, b in zip(self.lambdas, self.alpha, self.beta)]
        return "\n".join(lines) + "\n"


def angle_grid(num_angles: int = 1001) -> np.ndarray:
    """lambda values for equally spaced angles; odd sizes include lambda = 1."""
    if num_angles < 1:
        raise ValueError("num_angles must be positive")
    theta = np.linspace(_EPS, np.pi / 2 - _EPS, num_angles)
    return np.tan(theta)


def histograms_to_pr(p: np.ndarray, q: np.ndarray, lambdas: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """alpha(l) = sum_b min(l * P_b, Q_b); beta(l) = alpha(l) / l."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    alpha = np.minimum(lambdas[:, None] * p[None, :], q[None, :]).sum(axis=1)
    beta = alpha / lambdas
    return np.clip(alpha, 0.0, 1.0), np.clip(beta, 0.0, 1.0)


def cluster_histograms(
    set_p: np.ndarray, set_q: np.ndarray, num_bins: int = 10, seed: int = 0, max_iter: int = 20
) -> Tuple[np.ndarray, np.ndarray]:
    set_p = np.asarray(set_p, dtype=np.float64).reshape(len(set_p), -1)
    set_q = np.asarray(set_q, dtype=np.float64).reshape(len(set_q), -1)
    if len(set_p) < num_bins or len(set_q) < num_bins:
        raise ValueError(f"each set needs at least num_bins={num_bins} points "
                         f"(got {len(set_p)} and {len(set_q)})")
    data = np.concatenate([set_p, set_q])
    km = KMeans(n_clusters=num_bins, n_init=10, max_iter=max_iter, random_state=seed)
    assign = km.fit_predict(data)
    hp = np.bincount(assign[: len(set_p)], minlength=num_bins) / len(set_p)
    hq = np.bincount(assign[len(set_p):], minlength=num_bins) / len(set_q)
    return hp, hq


def pr_distribution_curve(
    set_p: np.ndarray,
    set_q: np.ndarray,
    num_bins: int = 10,
    num_angles: int = 1001,
    seed: int = 0,
) -> PRCurve:
    hp, hq = cluster_histograms(set_p, set_q, num_bins, seed)
    lambdas = angle_grid(num_angles)
    alpha, beta = histograms_to_pr(hp, hq, lambdas)
    return PRCurve(lambdas, alpha, beta, num_bins, seed)


def modality_subsets() -> Tuple[Tuple[str, ...], ...]:
    """The seven non-empty modality combinations, singles first."""
    out = []
    for k in (1, 2, 3):
        out.extend(itertools.combinations(MODALITY_ORDER, k))
    return tuple(out)


def subset_name(subset: Sequence[str]) -> str:
    return "+".join(subset)


def parse_subset(text: str) -> Tuple[str, ...]:
    if text in ("all", "full"):
        return MODALITY_ORDER
    parts = tuple(p for p in text.replace(",", "+").split("+") if p)
    unknown = [p for p in parts if p not in MODALITY_ORDER]
    if unknown or not parts:
        raise ValueError(f"bad modality subset {text!r}")
    return tuple(m for m in MODALITY_ORDER if m in parts)


def representation_sets(
    checkpoint,
    manifest: DatasetManifest,
    split: str = "test",
    keep: Sequence[str] = MODALITY_ORDER,
    rep: str = "fused",
    batch_size: int = 64,
) -> np.ndarray:
    """Per-sample representations with modalities outside ``keep`` zeroed at the SGFI input."""
    from .training import Checkpoint, batch_rows, encode_samples, run_inference

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    model = checkpoint.build_model()
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    data = encode_samples(samples, checkpoint.config, checkpoint.task, checkpoint.class_names)
    drop = [m for m in MODALITY_ORDER if m not in keep]
    inf = run_inference(model, data, batch_rows(len(data), batch_size), drop)
    if rep == "fused":
        return inf.fused
    if rep == "specific":
        return inf.specific.reshape(len(inf.specific), -1)
    if rep == "shared":
        return inf.shared.reshape(len(inf.shared), -1)
    raise ValueError(f"unknown representation {rep!r}")


def modality_ablation_traversal(
    checkpoint,
    manifest: DatasetManifest,
    split: str = "test",
    rep: str = "fused",
    num_bins: int = 10,
    num_angles: int = 1001,
    seed: int = 0,
    subsets: Optional[Sequence[Sequence[str]]] = None,
) -> Dict[str, PRCurve]:
    """PR curve of the full trimodal representation against every modality subset."""
    from .training import Checkpoint

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    full = representation_sets(checkpoint, manifest, split, MODALITY_ORDER, rep)
    curves = {}
    for subset in subsets or modality_subsets():
        reps = representation_sets(checkpoint, manifest, split, subset, rep)
        curves[subset_name(subset)] = pr_distribution_curve(full, reps, num_bins, num_angles, seed)
    return curves
