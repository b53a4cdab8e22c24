"""Regression and classification metrics for affective prediction.

All scores are raw fractions in [0, 1]; multiply by 100 for presentation.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np


def _clamp_round(x: np.ndarray, bound: int) -> np.ndarray:
    # numpy rounds half to even
    return np.round(np.clip(x, -bound, bound))


def regression_metrics(
    preds: Sequence[float],
    gts: Sequence[float],
    acc2_mode: str = "nonzero",
    strict_corr: bool = True,
) -> Dict[str, float]:
    """Acc7/Acc5/Acc3/Acc2/F1/MAE/Corr for sentiment scores in [-3, 3].

    ``acc2_mode="nonzero"`` scores Acc2/F1 on samples with gt != 0 and
    positive = strictly positive; ``"negative"`` keeps every sample and
    splits negative vs non-negative. F1 is support-weighted over the two
    classes. With ``strict_corr=False`` an undefined correlation is NaN
    instead of an error.
    """
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != g.shape:
        raise ValueError("preds and gts differ in length")

    out = {
        "Acc7": float(np.mean(_clamp_round(p, 3) == _clamp_round(g, 3))),
        "Acc5": float(np.mean(_clamp_round(p, 2) == _clamp_round(g, 2))),
        "Acc3": float(np.mean(np.sign(p) == np.sign(g))),
        "MAE": float(np.mean(np.abs(p - g))),
    }
    if acc2_mode == "nonzero":
        keep = g != 0
        pb, gb = p[keep] > 0, g[keep] > 0
    elif acc2_mode == "negative":
        pb, gb = p >= 0, g >= 0
    else:
        raise ValueError(f"unknown acc2_mode {acc2_mode!r}")
    if gb.size:
        out["Acc2"] = float(np.mean(pb == gb))
        out["F1"] = _weighted_f1(pb.astype(int), gb.astype(int), [0, 1])
    else:
        out["Acc2"] = out["F1"] = float("nan")

    if np.std(p) == 0 or np.std(g) == 0:
        if strict_corr:
            raise ValueError("undefined correlation")
        out["Corr"] = float("nan")
    else:
        out["Corr"] = float(np.corrcoef(p, g)[0, 1])
    return out


def _confusion(pred: np.ndarray, gt: np.ndarray, n: int) -> np.ndarray:
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (gt, pred), 1)
    return cm


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def _per_class(tp, fp, fn, tn):
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    specificity = _safe_div(tn, tn + fp)
    return precision, recall, f1, specificity


def _weighted_f1(pred: np.ndarray, gt: np.ndarray, classes: List[int]) -> float:
    cm = _confusion(pred, gt, len(classes))
    tp = np.diag(cm)
    _, _, f1, _ = _per_class(tp, cm.sum(0) - tp, cm.sum(1) - tp, 0)
    support = cm.sum(1)
    return float((f1 * support).sum() / support.sum())


Label = Union[str, Iterable[str]]


def _binarize(labels: Sequence[Label], class_names: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_names)}
    out = np.zeros((len(labels), len(class_names)), dtype=bool)
    for r, lab in enumerate(labels):
        names = (lab,) if isinstance(lab, str) else tuple(lab)
        for name in names:
            if name not in index:
                raise ValueError(f"unknown class {name!r}")
            out[r, index[name]] = True
    return out


def classification_metrics(
    pred_classes: Sequence[Label],
    gt_classes: Sequence[Label],
    class_names: Sequence[str],
    multilabel: Optional[bool] = None,
) -> Dict[str, float]:
    """Support-weighted and per-class scores for single- or multi-label predictions.

    Per class c (one-vs-rest counts): precision, recall, F1 ("b-F1/<c>") and
    balanced accuracy (TPR + TNR) / 2 ("w-Acc/<c>").

    - w-Precision / w-Recall / w-F1 / w-Acc: per-class scores weighted by gt support
    - s-Acc: fraction of exactly correct predictions
    - n-Acc: mean of per-class recalls
    - b-F1: unweighted mean of per-class F1
    """
    if len(pred_classes) != len(gt_classes):
        raise ValueError("pred and gt differ in length")
    if not len(gt_classes):
        raise ValueError("empty input")
    if multilabel is None:
        multilabel = any(not isinstance(x, str) for x in list(gt_classes) + list(pred_classes))
    pred = _binarize(pred_classes, class_names)
    gt = _binarize(gt_classes, class_names)

    tp = (pred & gt).sum(0)
    fp = (pred & ~gt).sum(0)
    fn = (~pred & gt).sum(0)
    tn = (~pred & ~gt).sum(0)
    precision, recall, f1, specificity = _per_class(tp, fp, fn, tn)
    balanced = 0.5 * (recall + specificity)
    support = gt.sum(0).astype(np.float64)
    weights = support / support.sum() if support.sum() else np.zeros_like(support)
    present = support > 0

    out = {
        "w-Precision": float((precision * weights).sum()),
        "w-Recall": float((recall * weights).sum()),
        "w-F1": float((f1 * weights).sum()),
        "w-Acc": float((balanced * weights).sum()),
        "s-Acc": float(np.mean((pred == gt).all(axis=1))),
        "n-Acc": float(recall[present].mean()) if present.any() else 0.0,
        "b-F1": float(f1.mean()),
    }
    for i, name in enumerate(class_names):
        out[f"b-F1/{name}"] = float(f1[i])
        out[f"w-Acc/{name}"] = float(balanced[i])
    return out
