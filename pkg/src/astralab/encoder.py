"""Spatial contextualizer: shared-latent projection plus a sparse-MoE transformer.

Each block is pre-norm: self-attention over the visible tokens (fillers
excluded from keys/values), then a top-k routed mixture of expert MLPs in
place of the dense feed-forward. Hidden states after configured tap layers
are exposed for the hierarchical decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .registry import ModelRegistry
from .sampling import WINDOW


@dataclass
class EncoderConfig:
    latent_dim: int = 1536
    num_layers: int = 6
    num_heads: int = 8
    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int | None = None  # defaults to 4 x latent_dim
    tap_layers: tuple[int, int, int] = (2, 4, 6)  # 1-indexed

    def __post_init__(self):
        if self.expert_hidden is None:
            self.expert_hidden = 4 * self.latent_dim
        if self.top_k > self.num_experts:
            raise ValueError(
                f"top_k {self.top_k} exceeds num_experts {self.num_experts}"
            )
        taps = tuple(self.tap_layers)
        if len(taps) != 3 or list(taps) != sorted(set(taps)):
            raise ValueError(f"tap_layers must be 3 strictly increasing layers, got {taps}")
        if taps[0] < 1 or taps[-1] > self.num_layers:
            raise ValueError(f"tap_layers {taps} outside [1, {self.num_layers}]")
        if self.latent_dim % self.num_heads != 0:
            raise ValueError("latent_dim must be divisible by num_heads")
        self.tap_layers = taps


def sincos_position_init(window: int, dim: int, scale: float = 0.3) -> torch.Tensor:
    """Smooth 2-D sin/cos basis used to initialize the learned position tables.

    Coherent geometry at step zero lets attention match nearby positions
    immediately; the tables remain ordinary learned parameters.
    """
    quarter = max(dim // 4, 1)
    freqs = torch.exp(
        torch.arange(quarter, dtype=torch.float32)
        * (-math.log(100.0) / max(quarter - 1, 1))
    )
    coords = torch.arange(window, dtype=torch.float32)
    angles = coords[:, None] * freqs[None, :]
    row_part = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    out = torch.zeros(window, window, dim)
    half = 2 * quarter
    out[:, :, :half] = row_part[None, :, :]  # columns vary along axis 1
    out[:, :, half : 2 * half] = row_part[:, None, :]  # rows vary along axis 0
    return out * scale


@dataclass
class RoutingRecord:
    """Router telemetry for one block over a token batch.

    probs: (T, E) router softmax; top_idx: (T, k) selected experts;
    gates: (T, k) renormalized top-k probabilities. Only valid (non-filler,
    non-pad) tokens are recorded.
    """

    probs: torch.Tensor
    top_idx: torch.Tensor
    gates: torch.Tensor


def load_balance_loss(record: RoutingRecord) -> torch.Tensor:
    """E * sum_e f_e * P_e over the record's tokens.

    f_e is the fraction of tokens whose top-1 expert is e and P_e the mean
    router probability of e; uniform routing gives exactly 1, full collapse
    onto one of E experts gives E.
    """
    probs = record.probs
    if probs.numel() == 0:
        raise ValueError("load_balance_loss needs at least one routed token")
    n_experts = probs.shape[-1]
    top1 = record.top_idx[:, 0]
    f = torch.bincount(top1, minlength=n_experts).to(probs.dtype) / probs.shape[0]
    p = probs.mean(dim=0)
    return n_experts * torch.sum(f * p)


class InputProjector(nn.Module):
    """Per-model two-layer MLP into the shared latent space."""

    def __init__(self, embed_dim: int, latent_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, latent_dim)
        self.fc2 = nn.Linear(latent_dim, latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttention(nn.Module):
    """Standard multi-head attention with an explicit key/value validity mask."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)
        q = q.transpose(1, 2)  # (b, h, t, hd)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_valid is not None:
            bad = ~key_valid[:, None, None, :]
            scores = scores.masked_fill(bad, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class ExpertMLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MoeFeedForward(nn.Module):
    """Top-k routed expert MLPs with gate-weighted combination, no capacity drop."""

    def __init__(self, dim: int, hidden: int, num_experts: int, top_k: int):
        super().__init__()
        self.num_experts = num_experts
        self.top_k = top_k
        self.router = nn.Linear(dim, num_experts)
        self.experts = nn.ModuleList(ExpertMLP(dim, hidden) for _ in range(num_experts))

    def forward(
        self, x: torch.Tensor, token_valid: torch.Tensor
    ) -> tuple[torch.Tensor, RoutingRecord, torch.Tensor]:
        """x: (n_tokens, dim) flattened tokens; token_valid flags real tokens."""
        probs = torch.softmax(self.router(x), dim=-1)
        top_p, top_idx = torch.topk(probs, self.top_k, dim=-1)
        gates = top_p / top_p.sum(dim=-1, keepdim=True)

        out = torch.zeros_like(x)
        for e, expert in enumerate(self.experts):
            sel = top_idx == e  # (n, k)
            hit = sel.any(dim=-1)
            if not hit.any():
                continue
            gate = (gates * sel).sum(dim=-1)[hit]
            out[hit] = out[hit] + gate.unsqueeze(-1) * expert(x[hit])

        record = RoutingRecord(
            probs=probs[token_valid].detach(),
            top_idx=top_idx[token_valid].detach(),
            gates=gates[token_valid].detach(),
        )
        aux = load_balance_loss(
            RoutingRecord(probs[token_valid], top_idx[token_valid], gates[token_valid])
        )
        return out, record, aux


class EncoderBlock(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.latent_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, config.num_heads)
        self.norm2 = nn.LayerNorm(d)
        self.moe = MoeFeedForward(
            d, config.expert_hidden, config.num_experts, config.top_k
        )

    def forward(self, x, key_valid):
        x = x + self.attn(self.norm1(x), key_valid)
        b, t, d = x.shape
        flat = self.norm2(x).reshape(b * t, d)
        moe_out, record, aux = self.moe(flat, key_valid.reshape(b * t))
        x = x + moe_out.reshape(b, t, d)
        return x, record, aux


class DenseBlock(nn.Module):
    """Reference block with a plain MLP feed-forward, used as the MoE
    degeneracy oracle: with E=1 / top_k=1 and shared parameters the two
    paths must agree bit-for-bit."""

    def __init__(self, norm1, attn, norm2, expert):
        super().__init__()
        self.norm1 = norm1
        self.attn = attn
        self.norm2 = norm2
        self.ffn = expert

    def forward(self, x, key_valid):
        x = x + self.attn(self.norm1(x), key_valid)
        b, t, d = x.shape
        # Flatten exactly like the MoE path so the comparison is bit-level.
        flat = self.norm2(x).reshape(b * t, d)
        return x + self.ffn(flat).reshape(b, t, d)


class SpatialMoeEncoder(nn.Module):
    """The contextualizer: positional table, MoE blocks, tap outputs.

    Tokens are already latent vectors (from the input projectors or the
    learned filler embedding); positions are local (col, row) pairs in the
    16x16 window.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.pos_embed = nn.Parameter(
            sincos_position_init(WINDOW, config.latent_dim)
        )
        self.blocks = nn.ModuleList(
            EncoderBlock(config) for _ in range(config.num_layers)
        )

    def forward(
        self,
        tokens: torch.Tensor,
        positions: torch.Tensor,
        valid: torch.Tensor,
    ) -> tuple[dict[int, torch.Tensor], list[RoutingRecord], torch.Tensor]:
        """Contextualize a batch of windows.

        Args:
            tokens: (B, T, latent) latent tokens.
            positions: (B, T, 2) local (col, row) integer pairs in [0, 16)^2.
            valid: (B, T) bool; False marks fillers/padding excluded from
                attention keys/values and from routing statistics.

        Returns:
            (tap_states, routing_records, aux_loss): hidden states after
            each tap layer keyed by the 1-indexed layer, per-block routing
            records, and the mean load-balance loss over blocks.
        """
        if positions.min() < 0 or positions.max() >= WINDOW:
            raise ValueError(
                f"positions must lie in [0, {WINDOW})^2, got range "
                f"[{int(positions.min())}, {int(positions.max())}]"
            )
        if tokens.shape[1] > WINDOW * WINDOW:
            raise ValueError(f"at most {WINDOW * WINDOW} tokens per window")
        x = tokens + self.pos_embed[positions[..., 1], positions[..., 0]]
        taps: dict[int, torch.Tensor] = {}
        records: list[RoutingRecord] = []
        aux_terms = []
        for i, block in enumerate(self.blocks, start=1):
            x, record, aux = block(x, valid)
            records.append(record)
            aux_terms.append(aux)
            if i in self.config.tap_layers:
                taps[i] = x
        aux_loss = torch.stack(aux_terms).mean()
        return taps, records, aux_loss

    def dense_reference(self) -> nn.Module:
        """Dense-FFN twin sharing this encoder's parameters (requires E=1)."""
        if self.config.num_experts != 1 or self.config.top_k != 1:
            raise ValueError("dense reference is defined for E=1, top_k=1")
        blocks = nn.ModuleList(
            DenseBlock(b.norm1, b.attn, b.norm2, b.moe.experts[0]) for b in self.blocks
        )
        encoder = self

        class _DenseTwin(nn.Module):
            def __init__(self):
                super().__init__()
                self.blocks = blocks

            def forward(self, tokens, positions, valid):
                x = tokens + encoder.pos_embed[positions[..., 1], positions[..., 0]]
                taps = {}
                for i, block in enumerate(self.blocks, start=1):
                    x = block(x, valid)
                    if i in encoder.config.tap_layers:
                        taps[i] = x
                return taps

        return _DenseTwin()


class ProjectorBank(nn.Module):
    """One input projector per registered model plus the shared filler token."""

    def __init__(self, registry: ModelRegistry, latent_dim: int):
        super().__init__()
        self.registry = registry
        self.projectors = nn.ModuleDict(
            {
                spec.name: InputProjector(spec.embed_dim, latent_dim)
                for spec in registry
            }
        )
        self.filler = nn.Parameter(torch.zeros(latent_dim))
        nn.init.normal_(self.filler, std=0.02)

    def forward(
        self, model_id: int, vectors: torch.Tensor, valid: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Project one model's vectors; filler-flagged rows take the learned
        filler embedding instead of the projector output."""
        try:
            name = self.registry[model_id].name
        except KeyError:
            raise ValueError(f"unknown model_id {model_id}") from None
        out = self.projectors[name](vectors)
        if valid is not None:
            out = torch.where(valid.unsqueeze(-1), out, self.filler.to(out.dtype))
        return out
