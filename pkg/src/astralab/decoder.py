"""Hierarchical cross-attention decoder reconstructing all embedding spaces.

Three blocks, each fed by one encoder tap: mask queries self-attend, then
cross-attend to the block's projected tap states, then pass a dense MLP.
Final query states go through per-model output heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import SelfAttention, sincos_position_init
from .registry import ModelRegistry
from .sampling import WINDOW


@dataclass
class DecoderConfig:
    decoder_dim: int = 512
    num_heads: int = 4
    num_blocks: int = 3

    def __post_init__(self):
        if self.num_blocks != 3:
            raise ValueError("decoder is fixed at 3 blocks, one per encoder tap")
        if self.decoder_dim % self.num_heads != 0:
            raise ValueError("decoder_dim must be divisible by num_heads")


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, queries, context, context_valid=None):
        b, nq, d = queries.shape
        nk = context.shape[1]
        q = self.q(queries).reshape(b, nq, self.num_heads, self.head_dim).transpose(1, 2)
        kv = self.kv(context).reshape(b, nk, 2, self.num_heads, self.head_dim)
        k, v = kv.unbind(dim=2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if context_valid is not None:
            scores = scores.masked_fill(~context_valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, config: DecoderConfig, latent_dim: int):
        super().__init__()
        d = config.decoder_dim
        self.tap_proj = nn.Linear(latent_dim, d)
        self.norm_c = nn.LayerNorm(d)  # tap states arrive at residual-stream scale
        self.norm_q = nn.LayerNorm(d)
        self.q_self = SelfAttention(d, config.num_heads)
        self.norm_x = nn.LayerNorm(d)
        self.xattn = CrossAttention(d, config.num_heads)
        self.norm_f = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d)
        )

    def forward(self, queries, tap_state, context_pos_embed, context_valid):
        queries = queries + self.q_self(self.norm_q(queries))
        # Keys get the decoder's own position table so query-key spatial
        # matching works from the first step.
        context = self.norm_c(self.tap_proj(tap_state)) + context_pos_embed
        queries = queries + self.xattn(self.norm_x(queries), context, context_valid)
        return queries + self.ffn(self.norm_f(queries))


class HierarchicalDecoder(nn.Module):
    """Mask-query decoder staged over the encoder taps."""

    def __init__(self, config: DecoderConfig, latent_dim: int, registry: ModelRegistry):
        super().__init__()
        self.config = config
        self.mask_token = nn.Parameter(torch.zeros(config.decoder_dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.pos_embed = nn.Parameter(
            sincos_position_init(WINDOW, config.decoder_dim)
        )
        self.blocks = nn.ModuleList(
            DecoderBlock(config, latent_dim) for _ in range(config.num_blocks)
        )
        self.out_heads = nn.ModuleDict(
            {spec.name: nn.Linear(config.decoder_dim, spec.embed_dim) for spec in registry}
        )
        self.registry = registry

    def forward(
        self,
        tap_states: list[torch.Tensor],
        masked_positions: torch.Tensor,
        context_positions: torch.Tensor,
        context_valid: torch.Tensor | None = None,
    ) -> dict[int, torch.Tensor]:
        """Predict every model's embedding at the masked positions.

        Args:
            tap_states: three (B, T, latent) hidden-state sets in encoder
                depth order, from one encode call.
            masked_positions: (B, Q, 2) local (col, row) pairs, unique per row.
            context_positions: (B, T, 2) local positions of the tap tokens.
            context_valid: (B, T) bool marking real (non-filler) tap tokens.

        Returns:
            model_id -> (B, Q, embed_dim) predictions.
        """
        if len(tap_states) != self.config.num_blocks:
            raise ValueError(
                f"expected {self.config.num_blocks} tap states, got {len(tap_states)}"
            )
        if masked_positions.min() < 0 or masked_positions.max() >= WINDOW:
            raise ValueError(f"masked positions must lie in [0, {WINDOW})^2")
        flat = masked_positions[..., 1] * WINDOW + masked_positions[..., 0]
        for b in range(flat.shape[0]):
            if torch.unique(flat[b]).numel() != flat.shape[1]:
                raise ValueError("duplicate masked position ids in one crop")

        q = self.mask_token + self.pos_embed[masked_positions[..., 1], masked_positions[..., 0]]
        ctx_pos = self.pos_embed[context_positions[..., 1], context_positions[..., 0]]
        for block, tap in zip(self.blocks, tap_states):
            q = block(q, tap, ctx_pos, context_valid)
        return {
            spec.model_id: self.out_heads[spec.name](q) for spec in self.registry
        }


def recon_loss(
    predictions: dict[int, torch.Tensor],
    targets: dict[int, torch.Tensor],
    eps: float = 1e-8,
) -> torch.Tensor:
    """Mean cosine distance averaged over masked positions, then over models.

    predictions[k] and targets[k] are (N_k, dim_k) stacks for the masked
    positions valid under model k; models with no valid positions are
    skipped and the leading average renormalizes over those present.
    """
    terms = []
    for k, target in targets.items():
        if target.shape[0] == 0:
            continue
        pred = predictions[k]
        if pred.shape != target.shape:
            raise ValueError(
                f"model {k}: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}"
            )
        num = (pred * target).sum(dim=-1)
        denom = (pred.norm(dim=-1) + eps) * (target.norm(dim=-1) + eps)
        terms.append((1.0 - num / denom).mean())
    if not terms:
        raise ValueError("no supervisable positions: every model's valid set is empty")
    return torch.stack(terms).mean()


def total_pretrain_loss(
    l_recon: torch.Tensor | float,
    l_moe: torch.Tensor | float,
    coeff: float = 0.01,
) -> torch.Tensor | float:
    """Reconstruction plus coeff-weighted load-balance regularizer."""
    if coeff < 0:
        raise ValueError(f"load-balance coefficient must be >= 0, got {coeff}")
    return l_recon + coeff * l_moe
