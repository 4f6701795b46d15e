"""Slide-text alignment: gated attention pooling and the symmetric contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class GatedAttentionPool(nn.Module):
    """Gated attention MIL: a_n ~ w^T (tanh(V h_n) * sigmoid(U h_n)).

    Aggregates a bag of tile states into one slide embedding, projected to
    the text dimension and L2-normalized. Attention weights are returned
    for inspection; dropout acts on the attention hidden units only while
    training.
    """

    def __init__(
        self, in_dim: int, attn_hidden: int = 256, out_dim: int = 512, dropout: float = 0.25
    ):
        super().__init__()
        self.v = nn.Linear(in_dim, attn_hidden)
        self.u = nn.Linear(in_dim, attn_hidden)
        self.score = nn.Linear(attn_hidden, 1)
        self.drop = nn.Dropout(dropout)
        self.proj = nn.Linear(in_dim, out_dim)

    def attention(self, tiles: torch.Tensor) -> torch.Tensor:
        """(N,) weights on the simplex for a (N, in_dim) bag."""
        if tiles.ndim != 2 or tiles.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, dim) bag, got {tuple(tiles.shape)}")
        gate = torch.tanh(self.v(tiles)) * torch.sigmoid(self.u(tiles))
        scores = self.score(self.drop(gate)).squeeze(-1)
        return torch.softmax(scores, dim=0)

    def forward(self, tiles: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn = self.attention(tiles)
        pooled = attn @ tiles
        slide = F.normalize(self.proj(pooled), dim=-1, eps=1e-12)
        return slide, attn

    def project_tiles(self, tiles: torch.Tensor) -> torch.Tensor:
        """Per-tile projection into the text space, unit-normalized."""
        return F.normalize(self.proj(tiles), dim=-1, eps=1e-12)


def abmil_aggregate(
    head: GatedAttentionPool, tiles: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(slide_embedding, attention) for one bag of tile states."""
    return head(tiles)


@dataclass
class AlignmentBatch:
    """B unit-norm slide embeddings paired with B unit-norm text embeddings."""

    slide_embeddings: torch.Tensor  # (B, 512)
    text_embeddings: torch.Tensor  # (B, 512)
    temperature: float = 0.1

    def __post_init__(self):
        s, t = self.slide_embeddings, self.text_embeddings
        if s.shape != t.shape or s.ndim != 2:
            raise ValueError(f"mismatched batch shapes {tuple(s.shape)} vs {tuple(t.shape)}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def directional_contrastive_loss(
    queries: torch.Tensor, keys: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Cross-entropy of each query against all keys, diagonal as the match."""
    logits = queries @ keys.T / temperature
    labels = torch.arange(queries.shape[0], device=queries.device)
    return F.cross_entropy(logits, labels)


def symmetric_contrastive_loss(batch: AlignmentBatch) -> torch.Tensor:
    """Mean of slide-to-text and text-to-slide InfoNCE at the batch temperature."""
    s, t = batch.slide_embeddings, batch.text_embeddings
    if s.shape[0] < 2:
        raise ValueError("contrastive batch needs at least 2 pairs")
    l_st = directional_contrastive_loss(s, t, batch.temperature)
    l_ts = directional_contrastive_loss(t, s, batch.temperature)
    return 0.5 * (l_st + l_ts)
