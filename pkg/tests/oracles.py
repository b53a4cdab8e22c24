"""Independent reference implementations used by the tests.

Everything here is written against plain numpy loops (or central finite
differences) and never calls into the package under test.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

FD_STEP = 1e-5
FD_TOL = 1e-4
GRAD_FLOOR = 1e-5  # above double-precision difference noise at FD_STEP


# ---------------------------------------------------------------------------
# finite differences


def fd_gradcheck(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], step: float = FD_STEP) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` must return a scalar and read ``tensors`` (float64, requires_grad)
    by reference; each entry is perturbed in place.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone().reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = t.data.reshape(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + step
            with torch.no_grad():
                hi = fn().item()
            flat[i] = old - step
            with torch.no_grad():
                lo = fn().item()
            flat[i] = old
            numeric[i] = (hi - lo) / (2 * step)
        # floor: some gradients vanish identically (e.g. key biases under softmax)
        denom = max(analytic.norm().item(), numeric.norm().item(), GRAD_FLOOR)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


def module_gradcheck(module: torch.nn.Module, fn: Callable[[], torch.Tensor], extra: Sequence[torch.Tensor] = ()) -> float:
    params = [p for p in module.parameters() if p.requires_grad]
    return fd_gradcheck(fn, list(params) + list(extra))


# ---------------------------------------------------------------------------
# attention building blocks


def np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def np_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def np_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def np_linear(x: np.ndarray, sd: Dict[str, np.ndarray], name: str) -> np.ndarray:
    return x @ sd[f"{name}.weight"].T + sd[f"{name}.bias"]


def np_perceiver_layer(latents: np.ndarray, x: np.ndarray, sd: Dict[str, np.ndarray], heads: int) -> np.ndarray:
    """Pre-norm cross-attention from latents to [x; latents], then a GELU FFN; residual on both."""
    n, d = latents.shape
    dh = d // heads
    kv = np.concatenate([x, latents], axis=0)
    qn = np_layer_norm(latents, sd["norm_q.weight"], sd["norm_q.bias"])
    kvn = np_layer_norm(kv, sd["norm_kv.weight"], sd["norm_kv.bias"])
    q = np_linear(qn, sd, "w_q")
    k = np_linear(kvn, sd, "w_k")
    v = np_linear(kvn, sd, "w_v")
    out = np.zeros_like(q)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        att = np_softmax(q[:, cols] @ k[:, cols].T / math.sqrt(dh))
        out[:, cols] = att @ v[:, cols]
    latents = np_linear(out, sd, "w_o") + latents
    hidden = np_gelu(np_linear(np_layer_norm(latents, sd["norm_ffn.weight"], sd["norm_ffn.bias"]), sd, "ffn.0"))
    return np_linear(hidden, sd, "ffn.3") + latents


def np_pool_rows(x: np.ndarray, m: int) -> np.ndarray:
    n = x.shape[0]
    rows = []
    for i in range(m):
        lo = math.floor(i * n / m)
        hi = math.ceil((i + 1) * n / m)
        rows.append(x[lo:hi].mean(axis=0))
    return np.stack(rows)


def np_bridge_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, m: int) -> np.ndarray:
    bridge = np_pool_rows(q, m)
    scores = (q @ bridge.T) @ (bridge @ k.T) / math.sqrt(q.shape[1])
    return np_softmax(scores) @ v


def np_gba_layer(fq: np.ndarray, fkv: np.ndarray, sd: Dict[str, np.ndarray], heads: int, m: int,
                 gate: str = "relu") -> np.ndarray:
    """Multi-query projection, bridge attention and two gated residual blocks."""
    g = (lambda z: np.maximum(z, 0.0)) if gate == "relu" else (lambda z: z)
    q = np_linear(fq, sd, "w_query")
    kv_head = np_linear(fkv, sd, "w_kv")
    kv = np.concatenate([kv_head] * heads, axis=1)
    fq = g(np_bridge_attention(q, kv, kv, m)) + fq
    hidden = np.maximum(np_linear(fq, sd, "ffn.0"), 0.0)
    return g(np_linear(hidden, sd, "ffn.3")) + fq


def state_numpy(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().double().numpy() for k, v in module.state_dict().items()}


# ---------------------------------------------------------------------------
# label generation


def brute_force_sclg(
    features_per_epoch: List[Dict[str, np.ndarray]],
    gts: np.ndarray,
    batches: List[List[int]],
    k: int,
    omega: float,
    start_epoch: int,
) -> Dict[str, np.ndarray]:
    """Pseudo labels after the given epochs, one subtask at a time, with explicit loops."""
    subtasks = list(features_per_epoch[0])
    labels = {s: gts.astype(np.float64).copy() for s in subtasks}
    for z, feats in enumerate(features_per_epoch, start=1):
        for s in subtasks:
            current = labels[s].copy()
            for batch in batches:
                for i in batch:
                    dists = []
                    for j in batch:
                        if j == i:
                            continue
                        diff = feats[s][i] - feats[s][j]
                        dists.append((math.sqrt(float(np.sum(diff * diff)) / len(diff)), j))
                    dists.sort()
                    shift = np.zeros_like(current[i])
                    for dist, j in dists[:k]:
                        shift = shift + math.exp(-omega * dist) * (gts[j] - current[i])
                    shift = shift / k
                    if z > start_epoch:
                        labels[s][i] = current[i] + shift / z
    return labels


# ---------------------------------------------------------------------------
# contrastive


def loop_intra_loss(specific: np.ndarray, shared: np.ndarray, tau: float) -> float:
    """specific, shared: (B, 3, d) unit vectors."""
    losses = []
    for sp, sh in zip(specific, shared):
        pos = sum(math.exp(sh[u] @ sh[w] / tau) for u in range(3) for w in range(3) if u != w)
        neg = sum(math.exp(sp[u] @ sp[w] / tau) for u in range(3) for w in range(3) if u != w)
        neg += sum(math.exp(sp[u] @ sh[w] / tau) for u in range(3) for w in range(3))
        losses.append(-math.log(pos / (pos + neg)))
    return float(np.mean(losses))


def loop_inter_loss(fused: np.ndarray, same: np.ndarray, upsilon: float, include_self: bool = False) -> float:
    terms = []
    b = len(fused)
    for j in range(b):
        pos = [q for q in range(b) if q != j and same[j, q]]
        if not pos:
            continue
        num = sum(math.exp(fused[j] @ fused[q] / upsilon) for q in pos)
        den = sum(math.exp(fused[j] @ fused[q] / upsilon) for q in range(b) if include_self or q != j)
        terms.append(-math.log(num / den))
    return float(np.mean(terms)) if terms else 0.0


# ---------------------------------------------------------------------------
# metrics


def loop_regression_metrics(preds: Sequence[float], gts: Sequence[float]) -> Dict[str, float]:
    def cls(x, bound):
        x = min(max(x, -bound), bound)
        return round(x)  # python rounds half to even as well

    def sign(x):
        return (x > 0) - (x < 0)

    n = len(preds)
    out = {
        "Acc7": sum(cls(p, 3) == cls(g, 3) for p, g in zip(preds, gts)) / n,
        "Acc5": sum(cls(p, 2) == cls(g, 2) for p, g in zip(preds, gts)) / n,
        "Acc3": sum(sign(p) == sign(g) for p, g in zip(preds, gts)) / n,
        "MAE": sum(abs(p - g) for p, g in zip(preds, gts)) / n,
    }
    pairs = [(p > 0, g > 0) for p, g in zip(preds, gts) if g != 0]
    out["Acc2"] = sum(a == b for a, b in pairs) / len(pairs)
    f1s, weights = [], []
    for c in (False, True):
        tp = sum(a == c and b == c for a, b in pairs)
        fp = sum(a == c and b != c for a, b in pairs)
        fn = sum(a != c and b == c for a, b in pairs)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        weights.append(sum(b == c for _, b in pairs))
    out["F1"] = sum(f * w for f, w in zip(f1s, weights)) / sum(weights)
    mp, mg = sum(preds) / n, sum(gts) / n
    cov = sum((p - mp) * (g - mg) for p, g in zip(preds, gts))
    sp = math.sqrt(sum((p - mp) ** 2 for p in preds))
    sg = math.sqrt(sum((g - mg) ** 2 for g in gts))
    out["Corr"] = cov / (sp * sg)
    return out


def loop_classification_metrics(pred_sets: List[set], gt_sets: List[set], classes: List[str]) -> Dict[str, float]:
    n = len(gt_sets)
    per = {}
    for c in classes:
        tp = sum(c in p and c in g for p, g in zip(pred_sets, gt_sets))
        fp = sum(c in p and c not in g for p, g in zip(pred_sets, gt_sets))
        fn = sum(c not in p and c in g for p, g in zip(pred_sets, gt_sets))
        tn = n - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per[c] = dict(prec=prec, rec=rec, f1=f1, bal=(rec + spec) / 2, support=tp + fn)
    total = sum(v["support"] for v in per.values())
    out = {
        "w-Precision": sum(v["prec"] * v["support"] for v in per.values()) / total,
        "w-Recall": sum(v["rec"] * v["support"] for v in per.values()) / total,
        "w-F1": sum(v["f1"] * v["support"] for v in per.values()) / total,
        "w-Acc": sum(v["bal"] * v["support"] for v in per.values()) / total,
        "s-Acc": sum(p == g for p, g in zip(pred_sets, gt_sets)) / n,
        "n-Acc": float(np.mean([v["rec"] for v in per.values() if v["support"] > 0])),
        "b-F1": float(np.mean([v["f1"] for v in per.values()])),
    }
    for c, v in per.items():
        out[f"b-F1/{c}"] = v["f1"]
        out[f"w-Acc/{c}"] = v["bal"]
    return out


# ---------------------------------------------------------------------------
# frame sampling


def brute_force_sample_frames(duration: float, rate: float, times: Sequence[float]) -> List[int]:
    if duration <= 0:
        grid = [0.0]
    else:
        grid = [i / rate for i in range(int(math.floor(duration * rate + 1e-9)) + 1)]
    picked = []
    for t in grid:
        best = min(range(len(times)), key=lambda j: (round(abs(times[j] - t), 9), j))
        if best not in picked:
            picked.append(best)
    return picked[: len(times)]
