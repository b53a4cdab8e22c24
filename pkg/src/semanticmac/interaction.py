"""Semantic-centric gated feature interaction (SGFI).

Gated bridge attention layers produce semantic-specific (intra-modal) and
semantic-shared (cross-modal) vectors per modality; their ordered
concatenation is the fused multimodal representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
from torch import nn

MODALITY_ORDER = ("text", "audio", "vision")


@dataclass
class GBAConfig:
    common_dim: int = 64
    heads: int = 4
    bridge_tokens: int = 4
    depth: int = 1
    gate: str = "relu"
    ffn_mult: int = 4
    init_std: float = 0.02
    dropout: float = 0.0
    # ablation switches
    use_modality_embedding: bool = True
    multi_query: bool = True
    use_bridge: bool = True
    two_stage_softmax: bool = False
    layer_norm: bool = False
    share_pathway_params: bool = False

    def __post_init__(self):
        if self.common_dim % self.heads:
            raise ValueError(f"common_dim {self.common_dim} not divisible by {self.heads} heads")
        if self.gate not in ("relu", "none"):
            raise ValueError(f"gate must be 'relu' or 'none', got {self.gate!r}")
        if self.bridge_tokens < 1:
            raise ValueError("bridge_tokens must be >= 1")


@dataclass
class SemanticRepresentations:
    """Batched SGFI outputs; vectors are stacked in (text, audio, vision) order."""

    specific: torch.Tensor  # (B, 3, d_c)
    shared: torch.Tensor  # (B, 3, d_c)

    @property
    def shared_concat(self) -> torch.Tensor:
        return self.shared.flatten(1)

    @property
    def fused(self) -> torch.Tensor:
        return fuse(self.specific.unbind(1), self.shared.unbind(1))


def fuse(specific: Sequence[torch.Tensor], shared: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate [sp_t, sp_a, sp_v, sh_t, sh_a, sh_v] along the feature axis."""
    if len(specific) != 3 or len(shared) != 3:
        raise ValueError("fuse needs three specific and three shared vectors")
    return torch.cat(list(specific) + list(shared), dim=-1)


def split_fused(fused: torch.Tensor, common_dim: int) -> Tuple[Tuple[torch.Tensor, ...], Tuple[torch.Tensor, ...]]:
    parts = fused.split(common_dim, dim=-1)
    if len(parts) != 6:
        raise ValueError(f"fused width {fused.shape[-1]} is not 6 x {common_dim}")
    return parts[:3], parts[3:]


def add_modality_embedding(tokens: torch.Tensor, modality: str, table: torch.Tensor) -> torch.Tensor:
    if modality not in MODALITY_ORDER:
        raise ValueError(f"unknown modality {modality!r}")
    return tokens + table[MODALITY_ORDER.index(modality)]


def adaptive_pool_matrix(n: int, m: int, dtype=torch.float64) -> torch.Tensor:
    """(m, n) averaging matrix; row i covers tokens [floor(i*n/m), ceil((i+1)*n/m))."""
    pool = torch.zeros(m, n, dtype=dtype)
    for i in range(m):
        start = (i * n) // m
        stop = -((-(i + 1) * n) // m)
        pool[i, start:stop] = 1.0 / (stop - start)
    return pool


def adaptive_avg_pool(x: torch.Tensor, m: int) -> torch.Tensor:
    """Pool the token axis (second to last) of ``x`` down to ``m`` rows."""
    return adaptive_pool_matrix(x.shape[-2], m, x.dtype).to(x.device) @ x


def multi_query_project(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    w_query: nn.Linear,
    w_kv: nn.Linear,
    heads: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-head query projections, one key/value head shared by all query heads.

    ``w_query`` maps d_c -> d_c (the ``heads`` query projections side by side);
    ``w_kv`` maps d_c -> d_c / heads. Keys/values are tiled ``heads`` times.
    """
    q_prime = w_query(q)
    k_h = w_kv(k)
    v_h = k_h if v is k else w_kv(v)
    reps = [1] * (k_h.dim() - 1) + [heads]
    return q_prime, k_h.repeat(*reps), v_h.repeat(*reps)


def bridge_scores(q_prime: torch.Tensor, k_prime: torch.Tensor, m: int) -> torch.Tensor:
    """Pre-softmax (Q'B^T)(BK'^T), at most rank m."""
    n = q_prime.shape[-2]
    if m >= n:
        raise ValueError(f"bridge must bottleneck: m={m} >= n={n}")
    bridge = adaptive_avg_pool(q_prime, m)
    return (q_prime @ bridge.transpose(-1, -2)) @ (bridge @ k_prime.transpose(-1, -2))


def _masked_softmax(scores: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(scores, dim=-1)


def bridge_attention(
    q_prime: torch.Tensor,
    k_prime: torch.Tensor,
    v_prime: torch.Tensor,
    m: int,
    key_mask: Optional[torch.Tensor] = None,
    use_bridge: bool = True,
    two_stage: bool = False,
) -> torch.Tensor:
    """Attention routed through m pooled query tokens, scaled by sqrt(d_c).

    ``use_bridge=False`` falls back to plain scaled dot-product attention;
    ``two_stage=True`` uses the agent-attention form (bridge tokens first
    summarise the values, queries then read the bridge tokens).
    """
    scale = math.sqrt(q_prime.shape[-1])
    if not use_bridge:
        return _masked_softmax(q_prime @ k_prime.transpose(-1, -2) / scale, key_mask) @ v_prime
    if two_stage:
        n = q_prime.shape[-2]
        if m >= n:
            raise ValueError(f"bridge must bottleneck: m={m} >= n={n}")
        bridge = adaptive_avg_pool(q_prime, m)
        agent = _masked_softmax(bridge @ k_prime.transpose(-1, -2) / scale, key_mask) @ v_prime
        return torch.softmax(q_prime @ bridge.transpose(-1, -2) / scale, dim=-1) @ agent
    scores = bridge_scores(q_prime, k_prime, m) / scale
    return _masked_softmax(scores, key_mask) @ v_prime


class GBALayer(nn.Module):
    """One gated bridge attention layer: two residual blocks, each ReLU-gated."""

    def __init__(self, config: GBAConfig, index: int = 0):
        super().__init__()
        d = config.common_dim
        self.config = config
        self.index = index
        self.heads = config.heads
        self.w_query = nn.Linear(d, d)
        if config.multi_query:
            self.w_kv = nn.Linear(d, d // config.heads)
        else:
            self.w_key = nn.Linear(d, d)
            self.w_value = nn.Linear(d, d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_mult * d),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.ffn_mult * d, d),
        )
        self.norm_attn = nn.LayerNorm(d) if config.layer_norm else nn.Identity()
        self.norm_ffn = nn.LayerNorm(d) if config.layer_norm else nn.Identity()
        self.dropout = nn.Dropout(config.dropout)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.normal_(mod.weight, std=config.init_std)
                nn.init.zeros_(mod.bias)

    def project(self, fq, fkv):
        if self.config.multi_query:
            return multi_query_project(fq, fkv, fkv, self.w_query, self.w_kv, self.heads)
        return self.w_query(fq), self.w_key(fkv), self.w_value(fkv)

    def _gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x) if self.config.gate == "relu" else x

    def forward(self, fq: torch.Tensor, fkv: torch.Tensor, key_mask: Optional[torch.Tensor] = None,
                self_attention: bool = False) -> torch.Tensor:
        cfg = self.config
        q_in = self.norm_attn(fq)
        kv_in = q_in if self_attention else self.norm_attn(fkv)
        q_prime, k_prime, v_prime = self.project(q_in, kv_in)
        attn = bridge_attention(q_prime, k_prime, v_prime, cfg.bridge_tokens, key_mask,
                                cfg.use_bridge, cfg.two_stage_softmax)
        fq = self._gate(self.dropout(attn)) + fq
        fq = self._gate(self.dropout(self.ffn(self.norm_ffn(fq)))) + fq
        if not torch.isfinite(fq).all():
            raise FloatingPointError(f"non-finite activations in GBA layer {self.index}")
        return fq


def masked_mean(tokens: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return tokens.mean(dim=-2)
    w = mask.to(tokens.dtype).unsqueeze(-1)
    return (tokens * w).sum(dim=-2) / w.sum(dim=-2).clamp_min(1.0)


class GBAStack(nn.Module):
    """Stacked GBA layers followed by mean pooling over query tokens."""

    def __init__(self, config: GBAConfig):
        super().__init__()
        self.layers = nn.ModuleList(GBALayer(config, i) for i in range(config.depth))

    def forward(self, fq, fkv, key_mask=None, query_mask=None, self_attention=False):
        for layer in self.layers:
            fq = layer(fq, fq if self_attention else fkv, key_mask, self_attention)
        return masked_mean(fq, query_mask)


def specific_pathway(tokens: torch.Tensor, stack: GBAStack, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Q = K = V = tokens of one modality; returns the pooled d_c vector."""
    return stack(tokens, tokens, mask, mask, self_attention=True)


def shared_pathway(
    tokens: Dict[str, torch.Tensor],
    stacks: Dict[str, GBAStack],
    masks: Optional[Dict[str, Optional[torch.Tensor]]] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Each modality queries the concatenation of the other two.

    Returns (sh_t, sh_a, sh_v, concat) with concat in (t, a, v) order.
    """
    masks = masks or {}
    missing = [m for m in MODALITY_ORDER if m not in tokens]
    if missing:
        raise ValueError(f"shared pathway needs all three modalities; missing {missing}")
    out = []
    for u in MODALITY_ORDER:
        others = [o for o in MODALITY_ORDER if o != u]
        kv = torch.cat([tokens[o] for o in others], dim=-2)
        key_mask = None
        if any(masks.get(o) is not None for o in others):
            key_mask = torch.cat([_full_mask(tokens[o], masks.get(o)) for o in others], dim=-1)
        out.append(stacks[u](tokens[u], kv, key_mask, masks.get(u)))
    return out[0], out[1], out[2], torch.cat(out, dim=-1)


def _full_mask(tokens: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is not None:
        return mask
    return torch.ones(tokens.shape[:-1], dtype=torch.bool, device=tokens.device)


class SemanticInteraction(nn.Module):
    """Input projections, modality embeddings and both SGFI pathways."""

    def __init__(self, input_dims: Dict[str, int], config: GBAConfig):
        super().__init__()
        d = config.common_dim
        self.config = config
        self.input_proj = nn.ModuleDict({u: nn.Linear(input_dims[u], d) for u in MODALITY_ORDER})
        self.modality_embedding = nn.Parameter(torch.randn(3, d) * config.init_std)
        if config.share_pathway_params:
            spec, shar = GBAStack(config), GBAStack(config)
            self.specific = nn.ModuleDict({u: spec for u in MODALITY_ORDER})
            self.shared = nn.ModuleDict({u: shar for u in MODALITY_ORDER})
        else:
            self.specific = nn.ModuleDict({u: GBAStack(config) for u in MODALITY_ORDER})
            self.shared = nn.ModuleDict({u: GBAStack(config) for u in MODALITY_ORDER})

    def embed(self, features: Dict[str, torch.Tensor], drop: Sequence[str] = ()) -> Dict[str, torch.Tensor]:
        out = {}
        for u in MODALITY_ORDER:
            tokens = self.input_proj[u](features[u])
            if u in drop:
                tokens = torch.zeros_like(tokens)
            if self.config.use_modality_embedding:
                tokens = add_modality_embedding(tokens, u, self.modality_embedding)
            out[u] = tokens
        return out

    def forward(
        self,
        features: Dict[str, torch.Tensor],
        masks: Optional[Dict[str, Optional[torch.Tensor]]] = None,
        drop: Sequence[str] = (),
    ) -> SemanticRepresentations:
        masks = masks or {}
        tokens = self.embed(features, drop)
        specific = [specific_pathway(tokens[u], self.specific[u], masks.get(u)) for u in MODALITY_ORDER]
        sh_t, sh_a, sh_v, _ = shared_pathway(tokens, self.shared, masks)
        return SemanticRepresentations(torch.stack(specific, dim=-2), torch.stack([sh_t, sh_a, sh_v], dim=-2))
