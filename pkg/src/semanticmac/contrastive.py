"""Intra-sample (specific vs shared) and inter-sample (label-guided) contrastive losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import FrozenSet, Hashable, Optional, Sequence, Union

import torch


class UninformativeBatchWarning(UserWarning):
    """No anchor in the batch had a positive partner."""


@dataclass
class ContrastiveConfig:
    tau: float = 0.5
    upsilon: float = 0.5
    alpha: float = 0.1
    beta: float = 0.1
    sentiment_threshold: float = 0.0
    include_self_in_denominator: bool = False
    use_intra: bool = True
    use_inter: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.upsilon <= 0:
            raise ValueError("temperatures must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalise along the last axis; zero vectors are rejected."""
    norms = v.norm(dim=-1, keepdim=True)
    if (norms <= eps).any():
        raise ValueError("degenerate representation")
    return v / norms


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # symmetrised dot product; for vectors both terms are the same
    return 0.5 * ((a * b).sum(-1) + (b * a).sum(-1))


def _check_unit(x: torch.Tensor, name: str) -> None:
    if ((x.norm(dim=-1) - 1).abs() > 1e-4).any():
        raise ValueError(f"{name} must be L2-normalised")


_OFF_DIAG = ~torch.eye(3, dtype=torch.bool)


def intra_sample_loss(specific: torch.Tensor, shared: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE over one sample's six vectors.

    Positives: shared/shared pairs across modalities (6 ordered terms).
    Negatives: specific/specific across modalities (6) plus every
    specific/shared pair, same modality included (9).
    specific, shared: (B, 3, d) or (3, d), unit length.
    """
    if specific.dim() == 2:
        specific, shared = specific[None], shared[None]
    _check_unit(specific, "specific representations")
    _check_unit(shared, "shared representations")
    b = specific.shape[0]
    sh_sh = shared @ shared.transpose(-1, -2) / tau
    sp_sp = specific @ specific.transpose(-1, -2) / tau
    sp_sh = specific @ shared.transpose(-1, -2) / tau
    mask = _OFF_DIAG.to(specific.device)
    pos = sh_sh[:, mask].reshape(b, -1)
    neg = torch.cat([sp_sp[:, mask].reshape(b, -1), sp_sh.reshape(b, -1)], dim=1)
    log_pos = torch.logsumexp(pos, dim=1)
    log_all = torch.logsumexp(torch.cat([pos, neg], dim=1), dim=1)
    return (log_all - log_pos).mean()


def assign_contrastive_class(label, task_kind: str, threshold: float = 0.0) -> Union[str, FrozenSet[str], Hashable]:
    """Class tag used to form positive pairs.

    Scores map to neg / neu / pos around +-threshold; multi-label labels become
    a frozenset (positives share at least one class).
    """
    if task_kind == "regression":
        y = float(label)
        if y < -threshold:
            return "neg"
        if y > threshold:
            return "pos"
        return "neu"
    if isinstance(label, (tuple, list, set, frozenset)):
        return frozenset(label)
    return label


def positive_mask(tags: Sequence) -> torch.Tensor:
    """(B, B) boolean matrix of positive pairs, diagonal excluded."""
    b = len(tags)
    mask = torch.zeros(b, b, dtype=torch.bool)
    for i in range(b):
        for j in range(b):
            if i == j:
                continue
            ti, tj = tags[i], tags[j]
            if isinstance(ti, frozenset) or isinstance(tj, frozenset):
                mask[i, j] = bool(frozenset(_as_set(ti)) & frozenset(_as_set(tj)))
            else:
                mask[i, j] = ti == tj
    return mask


def _as_set(tag):
    return tag if isinstance(tag, frozenset) else {tag}


def inter_sample_loss(
    fused: torch.Tensor,
    positives: torch.Tensor,
    upsilon: float,
    include_self_in_denominator: bool = False,
) -> torch.Tensor:
    """Supervised-contrastive loss over a batch of unit-length fused vectors.

    positives: (B, B) bool; anchors without any positive are skipped. When no
    anchor has a positive the loss is 0 and an UninformativeBatchWarning is
    emitted.
    """
    b = fused.shape[0]
    if b < 2:
        raise ValueError("need at least two samples")
    _check_unit(fused, "fused representations")
    positives = positives.to(fused.device).clone()
    eye = torch.eye(b, dtype=torch.bool, device=fused.device)
    positives &= ~eye
    anchors = positives.any(dim=1)
    if not anchors.any():
        warnings.warn("no positive pairs in batch", UninformativeBatchWarning, stacklevel=2)
        return fused.sum() * 0.0
    logits = fused @ fused.t() / upsilon
    neg_inf = torch.finfo(logits.dtype).min
    log_num = torch.logsumexp(logits.masked_fill(~positives, neg_inf), dim=1)
    den_logits = logits if include_self_in_denominator else logits.masked_fill(eye, neg_inf)
    log_den = torch.logsumexp(den_logits, dim=1)
    return (log_den - log_num)[anchors].mean()


def combined_cl_loss(intra, inter, alpha: float, beta: float):
    return alpha * intra + beta * inter


def sccl_loss(
    specific: torch.Tensor,
    shared: torch.Tensor,
    fused: torch.Tensor,
    tags: Sequence,
    config: ContrastiveConfig,
    positives: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Weighted sum of both terms on raw (un-normalised) representations."""
    total = fused.new_zeros(())
    if config.use_intra and config.alpha > 0:
        total = total + config.alpha * intra_sample_loss(normalize(specific), normalize(shared), config.tau)
    if config.use_inter and config.beta > 0 and fused.shape[0] >= 2:
        pos = positive_mask(tags) if positives is None else positives
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UninformativeBatchWarning)
            inter = inter_sample_loss(normalize(fused), pos, config.upsilon, config.include_self_in_denominator)
        total = total + config.beta * inter
    return total
