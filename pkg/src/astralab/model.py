"""Model container: projectors, MoE encoder, hierarchical decoder, and heads.

Also owns the canonical parameter naming used by the checkpoint container
and the windowed (unmasked) contextualization pass shared by alignment,
localization, and routing analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .alignment import GatedAttentionPool
from .decoder import DecoderConfig, HierarchicalDecoder, recon_loss
from .encoder import EncoderConfig, ProjectorBank, SpatialMoeEncoder
from .grid import SlideGrid
from .registry import ModelRegistry
from .sampling import WINDOW, CropBatch, local_to_colrow


@dataclass
class PretrainStep:
    """Differentiable losses plus telemetry for one crop batch."""

    recon: torch.Tensor
    moe_aux: torch.Tensor
    cosine_by_model: dict[int, float]


@dataclass
class ContextualizedSlide:
    """Per-cell encoder outputs for one slide (tissue cells only)."""

    slide_id: str
    cells: np.ndarray  # (N, 2) int (col, row)
    states: torch.Tensor  # (N, latent)
    final_probs: torch.Tensor  # (N, E) final-block router probabilities


class AstraModel(nn.Module):
    """Everything trainable, stage by stage.

    Pretraining owns projectors + encoder + decoder; alignment adds the
    gated-attention pool with its 512-d projection; downstream adds a
    linear classifier head.
    """

    def __init__(
        self,
        registry: ModelRegistry,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
    ):
        super().__init__()
        self.registry = registry
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.projectors = ProjectorBank(registry, encoder_config.latent_dim)
        self.encoder = SpatialMoeEncoder(encoder_config)
        self.decoder = HierarchicalDecoder(
            decoder_config, encoder_config.latent_dim, registry
        )
        self.abmil: GatedAttentionPool | None = None
        self.cls_head: nn.Linear | None = None

    # -- stage heads -------------------------------------------------

    def attach_alignment_head(
        self, attn_hidden: int = 256, out_dim: int = 512, dropout: float = 0.25
    ) -> GatedAttentionPool:
        self.abmil = GatedAttentionPool(
            self.encoder_config.latent_dim, attn_hidden, out_dim, dropout
        )
        dtype = self.encoder.pos_embed.dtype
        self.abmil.to(dtype)
        return self.abmil

    def attach_classifier(self, n_classes: int, in_dim: int = 512) -> nn.Linear:
        self.cls_head = nn.Linear(in_dim, n_classes)
        self.cls_head.to(self.encoder.pos_embed.dtype)
        return self.cls_head

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.pos_embed.dtype

    # -- pretraining forward ------------------------------------------

    def forward_crops(self, crops: list[CropBatch]) -> PretrainStep:
        """Encode+decode a batch of masked crops and compute the losses."""
        if not crops:
            raise ValueError("empty crop batch")
        dtype = self.dtype
        latent = self.encoder_config.latent_dim
        b = len(crops)
        n_vis = crops[0].visible_idx.shape[0]
        tokens = torch.zeros(b, n_vis, latent, dtype=dtype)
        positions = torch.zeros(b, n_vis, 2, dtype=torch.long)
        valid = torch.zeros(b, n_vis, dtype=torch.bool)
        for i, crop in enumerate(crops):
            vec = torch.as_tensor(crop.visible_embeddings, dtype=dtype)
            flags = torch.as_tensor(crop.visible_valid)
            tokens[i] = self.projectors(crop.input_model, vec, flags)
            positions[i] = torch.as_tensor(local_to_colrow(crop.visible_idx))
            valid[i] = flags

        taps, _records, moe_aux = self.encoder(tokens, positions, valid)
        tap_list = [taps[layer] for layer in self.encoder_config.tap_layers]

        masked_pos = torch.stack(
            [torch.as_tensor(local_to_colrow(c.masked_idx)) for c in crops]
        )
        preds = self.decoder(tap_list, masked_pos, positions, context_valid=valid)

        # Per-crop Eq-style loss, averaged over the batch.
        crop_losses = []
        cos_sums = {spec.model_id: 0.0 for spec in self.registry}
        cos_counts = {spec.model_id: 0 for spec in self.registry}
        for i, crop in enumerate(crops):
            pred_i = {}
            tgt_i = {}
            local_of = {int(m): j for j, m in enumerate(crop.masked_idx)}
            for k, (mk, tgt) in crop.targets.items():
                rows = torch.as_tensor([local_of[int(m)] for m in mk], dtype=torch.long)
                pred_i[k] = preds[k][i, rows]
                tgt_i[k] = torch.as_tensor(tgt, dtype=dtype)
            crop_losses.append(recon_loss(pred_i, tgt_i))
            with torch.no_grad():
                for k in tgt_i:
                    if tgt_i[k].shape[0] == 0:
                        continue
                    cs = torch.nn.functional.cosine_similarity(
                        pred_i[k], tgt_i[k], dim=-1
                    )
                    cos_sums[k] += float(cs.sum())
                    cos_counts[k] += cs.shape[0]
        recon = torch.stack(crop_losses).mean()
        cosine = {
            k: (cos_sums[k] / cos_counts[k]) if cos_counts[k] else float("nan")
            for k in cos_sums
        }
        return PretrainStep(recon=recon, moe_aux=moe_aux, cosine_by_model=cosine)

    # -- unmasked contextualization ------------------------------------

    @torch.no_grad()
    def contextualize(
        self, grid: SlideGrid, input_model: int | None = None
    ) -> ContextualizedSlide:
        """Encode every tissue cell of a slide through 16x16 window tiling.

        Windows are tiled at stride 16 with edge windows shifted inward;
        windows without tissue are skipped. Tissue cells the input model
        does not cover enter as filler tokens.
        """
        cells, states, probs = self._contextualize_impl(grid, input_model)
        return ContextualizedSlide(grid.slide_id, cells, states, probs)

    def contextualize_with_grad(
        self, grid: SlideGrid, input_model: int | None = None
    ) -> ContextualizedSlide:
        cells, states, probs = self._contextualize_impl(grid, input_model)
        return ContextualizedSlide(grid.slide_id, cells, states, probs)

    def _contextualize_impl(self, grid: SlideGrid, input_model: int | None):
        if input_model is None:
            input_model = self.registry.anchor.model_id
        if grid.width_cells < WINDOW or grid.height_cells < WINDOW:
            raise ValueError(
                f"slide {grid.slide_id}: lattice smaller than the {WINDOW}x{WINDOW} window"
            )
        dtype = self.dtype
        dim = self.registry[input_model].embed_dim

        origins = []
        for row0 in _tiling_starts(grid.height_cells):
            for col0 in _tiling_starts(grid.width_cells):
                origins.append((col0, row0))

        windows = []  # (origin, local_idx of tissue cells, input rows or -1)
        for origin in origins:
            col0, row0 = origin
            sub_valid = grid.tissue_valid[row0 : row0 + WINDOW, col0 : col0 + WINDOW]
            local = np.flatnonzero(sub_valid.ravel())
            if len(local) == 0:
                continue
            sub_rows = grid.row_index(input_model)[
                row0 : row0 + WINDOW, col0 : col0 + WINDOW
            ].ravel()[local]
            windows.append((origin, local, sub_rows))
        if not windows:
            raise ValueError(f"slide {grid.slide_id} has no tissue cells")

        t_max = max(len(w[1]) for w in windows)
        bsz = len(windows)
        tokens = torch.zeros(bsz, t_max, self.encoder_config.latent_dim, dtype=dtype)
        positions = torch.zeros(bsz, t_max, 2, dtype=torch.long)
        valid = torch.zeros(bsz, t_max, dtype=torch.bool)
        emb = grid.embeddings(input_model)
        for i, (origin, local, sub_rows) in enumerate(windows):
            t = len(local)
            vec = np.zeros((t, dim), dtype=np.float32)
            present = sub_rows >= 0
            vec[present] = emb[sub_rows[present]]
            flags = torch.as_tensor(present)
            tokens[i, :t] = self.projectors(
                input_model, torch.as_tensor(vec, dtype=dtype), flags
            )
            positions[i, :t] = torch.as_tensor(local_to_colrow(local))
            valid[i, :t] = flags

        taps, records, _aux = self.encoder(tokens, positions, valid)
        final_states = taps[self.encoder_config.tap_layers[-1]]
        final_record = records[-1]

        # records hold only valid tokens, flattened in (window, slot) order.
        probs_full = torch.zeros(
            bsz, t_max, self.encoder_config.num_experts, dtype=final_record.probs.dtype
        )
        probs_full[valid] = final_record.probs

        seen = set()
        out_cells = []
        out_states = []
        out_probs = []
        for i, (origin, local, sub_rows) in enumerate(windows):
            col0, row0 = origin
            cr = local_to_colrow(local)
            for j in range(len(local)):
                cell = (col0 + int(cr[j, 0]), row0 + int(cr[j, 1]))
                if cell in seen:
                    continue
                seen.add(cell)
                out_cells.append(cell)
                out_states.append(final_states[i, j])
                out_probs.append(probs_full[i, j])
        return (
            np.asarray(out_cells, dtype=np.int32),
            torch.stack(out_states),
            torch.stack(out_probs),
        )

    # -- canonical named parameters ------------------------------------

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Stable checkpoint names for every parameter present."""
        out: dict[str, torch.Tensor] = {}

        def lin(prefix: str, layer: nn.Linear, w="w", bias="b"):
            out[f"{prefix}.{w}"] = layer.weight
            out[f"{prefix}.{bias}"] = layer.bias

        for spec in self.registry:
            proj = self.projectors.projectors[spec.name]
            out[f"input_proj.{spec.name}.w1"] = proj.fc1.weight
            out[f"input_proj.{spec.name}.b1"] = proj.fc1.bias
            out[f"input_proj.{spec.name}.w2"] = proj.fc2.weight
            out[f"input_proj.{spec.name}.b2"] = proj.fc2.bias
        out["mask_filler"] = self.projectors.filler
        out["pos_embed"] = self.encoder.pos_embed

        for i, block in enumerate(self.encoder.blocks, start=1):
            lin(f"enc.{i}.attn.qkv", block.attn.qkv)
            lin(f"enc.{i}.attn.proj", block.attn.proj)
            lin(f"enc.{i}.norm1", block.norm1)
            lin(f"enc.{i}.norm2", block.norm2)
            lin(f"enc.{i}.router", block.moe.router)
            for e, expert in enumerate(block.moe.experts):
                out[f"enc.{i}.expert{e}.w1"] = expert.fc1.weight
                out[f"enc.{i}.expert{e}.b1"] = expert.fc1.bias
                out[f"enc.{i}.expert{e}.w2"] = expert.fc2.weight
                out[f"enc.{i}.expert{e}.b2"] = expert.fc2.bias

        out["mask_token"] = self.decoder.mask_token
        out["dec.pos_embed"] = self.decoder.pos_embed
        for i, block in enumerate(self.decoder.blocks, start=1):
            lin(f"dec.{i}.tap_proj", block.tap_proj)
            lin(f"dec.{i}.q_self.qkv", block.q_self.qkv)
            lin(f"dec.{i}.q_self.proj", block.q_self.proj)
            lin(f"dec.{i}.xattn.q", block.xattn.q)
            lin(f"dec.{i}.xattn.kv", block.xattn.kv)
            lin(f"dec.{i}.xattn.proj", block.xattn.proj)
            lin(f"dec.{i}.norm_c", block.norm_c)
            lin(f"dec.{i}.norm_q", block.norm_q)
            lin(f"dec.{i}.norm_x", block.norm_x)
            lin(f"dec.{i}.norm_f", block.norm_f)
            lin(f"dec.{i}.ffn.fc1", block.ffn[0])
            lin(f"dec.{i}.ffn.fc2", block.ffn[2])
        for spec in self.registry:
            lin(f"out_head.{spec.name}", self.out_head(spec.model_id))

        if self.abmil is not None:
            lin("abmil.v", self.abmil.v)
            lin("abmil.u", self.abmil.u)
            lin("abmil.score", self.abmil.score)
            lin("slide_proj", self.abmil.proj)
        if self.cls_head is not None:
            lin("cls_head", self.cls_head)
        return out

    def out_head(self, model_id: int) -> nn.Linear:
        return self.decoder.out_heads[self.registry[model_id].name]

    def load_named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy checkpoint arrays into the matching parameters (strict)."""
        own = self.named_arrays()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise ValueError(
                f"checkpoint mismatch; missing={missing[:4]} extra={extra[:4]}"
            )
        with torch.no_grad():
            for name, param in own.items():
                value = torch.as_tensor(arrays[name], dtype=param.dtype)
                if value.shape != param.shape:
                    raise ValueError(
                        f"{name}: checkpoint shape {tuple(value.shape)} vs "
                        f"model {tuple(param.shape)}"
                    )
                param.copy_(value)


def _tiling_starts(extent: int) -> list[int]:
    starts = list(range(0, extent - WINDOW + 1, WINDOW))
    last = extent - WINDOW
    if starts[-1] != last:
        starts.append(last)
    return starts


def build_model(
    registry: ModelRegistry,
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> AstraModel:
    """Seeded construction so two builds are parameter-identical."""
    torch.manual_seed(seed)
    model = AstraModel(registry, encoder_config, decoder_config)
    model.to(dtype)
    return model
