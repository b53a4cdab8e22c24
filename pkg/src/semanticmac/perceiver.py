"""Affective Perceiver: compress variable-length frame tokens into n learnable tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn


@dataclass
class PerceiverConfig:
    n_tokens: int = 8
    depth: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_frames: int = 256
    init_std: float = 0.02
    dropout: float = 0.0
    # ablation switches
    use_frame_embeddings: bool = True
    use_layer_norm: bool = True
    use_residual: bool = True
    share_frame_embeddings: bool = False

    def __post_init__(self):
        if self.n_tokens < 1:
            raise ValueError("n_tokens must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


def add_frame_embeddings(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Add row i of the frame-embedding table to frame i of ``x``."""
    f = x.shape[-2]
    if f > table.shape[0]:
        raise ValueError(f"{f} frames exceed the frame-embedding table ({table.shape[0]} rows); re-sample upstream")
    return x + table[:f]


def multihead_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    key_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    q: (B, n, d); k, v: (B, s, d); key_mask: (B, s) with True for valid keys.
    """
    b, n, d = q.shape
    s = k.shape[1]
    dh = d // heads
    q = q.view(b, n, heads, dh).transpose(1, 2)
    k = k.view(b, s, heads, dh).transpose(1, 2)
    v = v.view(b, s, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(b, n, d)


class PerceiverLayer(nn.Module):
    """Pre-norm cross-attention block: Q = L, K = V = [X; L], then an FFN.

    Queries and the key/value stream get separate layer norms.
    """

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.0,
                 use_layer_norm: bool = True, use_residual: bool = True, index: int = 0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.index = index
        self.use_residual = use_residual
        norm = (lambda: nn.LayerNorm(dim)) if use_layer_norm else nn.Identity
        self.norm_q = norm()
        self.norm_kv = norm()
        self.norm_ffn = norm()
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_mult * dim, dim),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, latents: torch.Tensor, x: torch.Tensor, x_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        kv = torch.cat([x, latents], dim=1)
        key_mask = None
        if x_mask is not None:
            ones = torch.ones(latents.shape[:2], dtype=torch.bool, device=latents.device)
            key_mask = torch.cat([x_mask, ones], dim=1)
        kv = self.norm_kv(kv)
        attn = multihead_attention(self.w_q(self.norm_q(latents)), self.w_k(kv), self.w_v(kv), self.heads, key_mask)
        attn = self.dropout(self.w_o(attn))
        latents = attn + latents if self.use_residual else attn
        ff = self.dropout(self.ffn(self.norm_ffn(latents)))
        latents = ff + latents if self.use_residual else ff
        if not torch.isfinite(latents).all():
            raise FloatingPointError(f"non-finite activations in perceiver layer {self.index}")
        return latents


def perceiver_layer(latents, x, layer: PerceiverLayer, x_mask=None):
    """Unbatched convenience wrapper: (n, d) latents and (f, d) frames."""
    if latents.dim() == 2:
        return layer(latents[None], x[None], None if x_mask is None else x_mask[None])[0]
    return layer(latents, x, x_mask)


class AffectivePerceiver(nn.Module):
    def __init__(self, dim: int, config: PerceiverConfig, frame_embeddings: Optional[nn.Parameter] = None):
        super().__init__()
        self.dim = dim
        self.config = config
        self.tokens = nn.Parameter(torch.randn(config.n_tokens, dim) * config.init_std)
        if frame_embeddings is None:
            frame_embeddings = nn.Parameter(torch.randn(config.max_frames, dim) * config.init_std)
        self.frame_embeddings = frame_embeddings
        self.layers = nn.ModuleList(
            PerceiverLayer(dim, config.heads, config.ffn_mult, config.dropout,
                           config.use_layer_norm, config.use_residual, index=i)
            for i in range(config.depth)
        )
        for mod in self.layers.modules():
            if isinstance(mod, nn.Linear):
                nn.init.normal_(mod.weight, std=config.init_std)
                nn.init.zeros_(mod.bias)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """x: (B, f, d) or (f, d) frame tokens; returns (B, n, d) or (n, d)."""
        unbatched = x.dim() == 2
        if unbatched:
            x = x[None]
            mask = None if mask is None else mask[None]
        if self.config.use_frame_embeddings:
            x = add_frame_embeddings(x, self.frame_embeddings)
        latents = self.tokens.expand(x.shape[0], -1, -1)
        for layer in self.layers:
            latents = layer(latents, x, mask)
        return latents[0] if unbatched else latents


def run_perceiver(x: torch.Tensor, perceiver: AffectivePerceiver, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return perceiver(x, mask)


def zero_attention_weights(module: nn.Module) -> None:
    """Zero every Linear in ``module``; only residual paths remain."""
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, nn.Linear):
                mod.weight.zero_()
                if mod.bias is not None:
                    mod.bias.zero_()


__all__ = [
    "PerceiverConfig",
    "PerceiverLayer",
    "AffectivePerceiver",
    "add_frame_embeddings",
    "multihead_attention",
    "perceiver_layer",
    "run_perceiver",
    "zero_attention_weights",
]
