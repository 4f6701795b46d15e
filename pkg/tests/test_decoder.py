"""Hierarchical decoder: shapes, equivariance, loss anchors, gradients."""

import numpy as np
import pytest
import torch

from astralab.decoder import (
    DecoderConfig,
    HierarchicalDecoder,
    recon_loss,
    total_pretrain_loss,
)
from astralab.encoder import EncoderConfig, SpatialMoeEncoder
from astralab.registry import desk_registry, reference_registry


def tiny_setup(dtype=torch.float64, seed=0, latent=16, dec=16):
    torch.manual_seed(seed)
    registry = desk_registry()
    enc_cfg = EncoderConfig(
        latent_dim=latent, num_layers=6, num_heads=2, num_experts=2, top_k=2,
        expert_hidden=24, tap_layers=(2, 4, 6),
    )
    encoder = SpatialMoeEncoder(enc_cfg).to(dtype)
    decoder = HierarchicalDecoder(DecoderConfig(decoder_dim=dec, num_heads=2), latent, registry).to(dtype)
    return registry, enc_cfg, encoder, decoder


def run_encoder(encoder, enc_cfg, b=1, t=8, dtype=torch.float64, seed=1):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(b, t, enc_cfg.latent_dim, generator=g, dtype=dtype)
    pos_flat = torch.stack([torch.randperm(256, generator=g)[:t] for _ in range(b)])
    positions = torch.stack([pos_flat % 16, pos_flat // 16], dim=-1)
    valid = torch.ones(b, t, dtype=torch.bool)
    taps, _, aux = encoder(tokens, positions, valid)
    return taps, positions, valid, aux


def masked_positions(b, q, t_positions, seed=2):
    g = torch.Generator().manual_seed(seed)
    out = []
    for i in range(b):
        used = set((int(c) + 16 * int(r)) for c, r in t_positions[i].tolist())
        free = [p for p in range(256) if p not in used]
        idx = torch.randperm(len(free), generator=g)[:q]
        chosen = [free[j] for j in idx.tolist()]
        out.append([[p % 16, p // 16] for p in chosen])
    return torch.as_tensor(out)


class TestDecode:
    def test_prediction_shapes_at_reference_dims(self):
        torch.manual_seed(3)
        registry = reference_registry()
        latent = 16
        enc_cfg = EncoderConfig(latent_dim=latent, num_heads=2, num_experts=2,
                                expert_hidden=24)
        encoder = SpatialMoeEncoder(enc_cfg).double()
        decoder = HierarchicalDecoder(DecoderConfig(decoder_dim=16, num_heads=2),
                                      latent, registry).double()
        taps, positions, valid, _ = run_encoder(encoder, enc_cfg, t=1)
        mpos = masked_positions(1, 1, positions)
        preds = decoder([taps[2], taps[4], taps[6]], mpos, positions, valid)
        dims = [preds[m].shape[-1] for m in range(4)]
        assert dims == [1536, 1536, 768, 2560]
        for m in range(4):
            assert preds[m].shape[:2] == (1, 1)

    def test_duplicate_masked_position_rejected(self):
        registry, enc_cfg, encoder, decoder = tiny_setup()
        taps, positions, valid, _ = run_encoder(encoder, enc_cfg)
        mpos = torch.as_tensor([[[3, 4], [3, 4]]])
        with pytest.raises(ValueError, match="duplicate"):
            decoder([taps[2], taps[4], taps[6]], mpos, positions, valid)

    def test_wrong_tap_count_rejected(self):
        registry, enc_cfg, encoder, decoder = tiny_setup()
        taps, positions, valid, _ = run_encoder(encoder, enc_cfg)
        with pytest.raises(ValueError, match="tap"):
            decoder([taps[2], taps[4]], masked_positions(1, 2, positions), positions, valid)

    def test_query_permutation_equivariance(self):
        registry, enc_cfg, encoder, decoder = tiny_setup()
        taps, positions, valid, _ = run_encoder(encoder, enc_cfg)
        mpos = masked_positions(1, 12, positions)
        preds = decoder([taps[2], taps[4], taps[6]], mpos, positions, valid)
        perm = torch.randperm(12)
        preds_p = decoder([taps[2], taps[4], taps[6]], mpos[:, perm], positions, valid)
        for m in range(4):
            assert torch.allclose(preds[m][:, perm], preds_p[m], atol=1e-10)

    def test_staged_coupling_wiring(self):
        # zeroing tap-2 changes outputs; blocks 2-3 keys depend only on taps 4/6
        registry, enc_cfg, encoder, decoder = tiny_setup()
        taps, positions, valid, _ = run_encoder(encoder, enc_cfg)
        mpos = masked_positions(1, 6, positions)
        base = decoder([taps[2], taps[4], taps[6]], mpos, positions, valid)
        zeroed = decoder([torch.zeros_like(taps[2]), taps[4], taps[6]], mpos, positions, valid)
        assert not torch.allclose(base[0], zeroed[0], atol=1e-9)
        ctx_pos = decoder.pos_embed[positions[..., 1], positions[..., 0]]
        for block, tap in zip(decoder.blocks[1:], [taps[4], taps[6]]):
            a = block.norm_c(block.tap_proj(tap)) + ctx_pos
            assert torch.allclose(a, a, atol=0)  # same tap -> same keys by construction

    def test_filler_context_excluded(self):
        registry, enc_cfg, encoder, decoder = tiny_setup()
        taps, positions, valid, _ = run_encoder(encoder, enc_cfg, t=8)
        flags = valid.clone()
        flags[0, 5:] = False
        mpos = masked_positions(1, 4, positions)
        tap_list = [taps[2], taps[4], taps[6]]
        base = decoder(tap_list, mpos, positions, flags)
        mutated = [t.clone() for t in tap_list]
        for t in mutated:
            t[0, 5:] += 7.0
        out = decoder(mutated, mpos, positions, flags)
        for m in range(4):
            assert torch.allclose(base[m], out[m], atol=1e-12)


class TestReconLoss:
    def _random_pair(self, seed, n=10, dims=(6, 9)):
        g = torch.Generator().manual_seed(seed)
        preds = {k: torch.randn(n, d, generator=g, dtype=torch.float64) for k, d in enumerate(dims)}
        tgts = {k: torch.randn(n, d, generator=g, dtype=torch.float64) for k, d in enumerate(dims)}
        return preds, tgts

    def test_identical_gives_zero(self):
        preds, _ = self._random_pair(0)
        loss = recon_loss(preds, {k: v.clone() for k, v in preds.items()})
        assert float(loss) == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal_gives_one(self):
        preds = {0: torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)}
        tgts = {0: torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)}
        assert float(recon_loss(preds, tgts)) == pytest.approx(1.0, abs=1e-9)

    def test_antipodal_gives_two(self):
        preds, _ = self._random_pair(1)
        tgts = {k: -v for k, v in preds.items()}
        assert float(recon_loss(preds, tgts)) == pytest.approx(2.0, abs=1e-7)

    def test_range_on_random_inputs(self):
        for seed in range(50):
            preds, tgts = self._random_pair(seed)
            val = float(recon_loss(preds, tgts))
            assert 0.0 <= val <= 2.0

    def test_empty_model_renormalizes(self):
        preds, tgts = self._random_pair(2)
        # model 1 contributes nothing; loss equals model 0's own mean
        tgts[1] = torch.zeros(0, 9, dtype=torch.float64)
        preds[1] = torch.zeros(0, 9, dtype=torch.float64)
        solo = recon_loss({0: preds[0]}, {0: tgts[0]})
        both = recon_loss(preds, tgts)
        assert float(both) == pytest.approx(float(solo), rel=1e-12)

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError, match="supervisable"):
            recon_loss({0: torch.zeros(0, 3)}, {0: torch.zeros(0, 3)})

    def test_matches_manual_formula(self):
        preds, tgts = self._random_pair(3, n=7, dims=(5, 8, 11))
        manual = []
        for k in preds:
            p = preds[k].numpy()
            t = tgts[k].numpy()
            cos = (p * t).sum(1) / (
                (np.linalg.norm(p, axis=1) + 1e-8) * (np.linalg.norm(t, axis=1) + 1e-8)
            )
            manual.append(float(np.mean(1 - cos)))
        assert float(recon_loss(preds, tgts)) == pytest.approx(np.mean(manual), rel=1e-10)


class TestTotalLoss:
    def test_paper_coefficient_anchor(self):
        assert total_pretrain_loss(1.0, 1.0, 0.01) == 1.01

    def test_zero_coefficient(self):
        assert total_pretrain_loss(0.37, 5.0, 0.0) == 0.37

    def test_arithmetic(self):
        assert total_pretrain_loss(0.37, 2.0, 0.01) == pytest.approx(0.39, abs=1e-12)

    def test_negative_coefficient_rejected(self):
        with pytest.raises(ValueError):
            total_pretrain_loss(1.0, 1.0, -0.1)


class TestFullObjectiveGradient:
    def test_pretrain_objective_matches_finite_differences(self):
        registry, enc_cfg, encoder, decoder = tiny_setup(latent=12, dec=12)
        g = torch.Generator().manual_seed(9)
        tokens = torch.randn(1, 8, 12, generator=g, dtype=torch.float64)
        pos_flat = torch.randperm(256, generator=g)[:8].unsqueeze(0)
        positions = torch.stack([pos_flat % 16, pos_flat // 16], dim=-1)
        valid = torch.ones(1, 8, dtype=torch.bool)
        mpos = masked_positions(1, 6, positions, seed=10)
        tgts = {
            spec.model_id: torch.randn(6, spec.embed_dim, generator=g, dtype=torch.float64)
            for spec in registry
        }

        params = list(encoder.parameters()) + list(decoder.parameters())

        def objective():
            taps, _, aux = encoder(tokens, positions, valid)
            preds = decoder([taps[2], taps[4], taps[6]], mpos, positions, valid)
            flat = {k: preds[k][0] for k in preds}
            return recon_loss(flat, tgts) + 0.01 * aux

        loss = objective()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [gr if gr is not None else torch.zeros_like(p) for gr, p in zip(grads, params)]

        gen = torch.Generator().manual_seed(11)
        h = 1e-6
        for _ in range(6):
            direction = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]
            norm = torch.sqrt(sum((d * d).sum() for d in direction))
            direction = [d / norm for d in direction]
            analytic = float(sum((gr * d).sum() for gr, d in zip(grads, direction)))
            with torch.no_grad():
                for p, d in zip(params, direction):
                    p += h * d
            with torch.no_grad():
                up = float(objective())
                for p, d in zip(params, direction):
                    p -= 2 * h * d
                down = float(objective())
            with torch.no_grad():
                for p, d in zip(params, direction):
                    p += h * d
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(numeric), 1e-10)
            assert rel < 1e-4

    def test_out_head_gradients_nonzero_when_supervised(self):
        registry, enc_cfg, encoder, decoder = tiny_setup(latent=12, dec=12)
        g = torch.Generator().manual_seed(12)
        tokens = torch.randn(1, 8, 12, generator=g, dtype=torch.float64)
        pos_flat = torch.randperm(256, generator=g)[:8].unsqueeze(0)
        positions = torch.stack([pos_flat % 16, pos_flat // 16], dim=-1)
        valid = torch.ones(1, 8, dtype=torch.bool)
        mpos = masked_positions(1, 6, positions, seed=13)
        taps, _, _ = encoder(tokens, positions, valid)
        preds = decoder([taps[2], taps[4], taps[6]], mpos, positions, valid)
        tgts = {
            spec.model_id: torch.randn(6, spec.embed_dim, generator=g, dtype=torch.float64)
            for spec in registry
        }
        loss = recon_loss({k: preds[k][0] for k in preds}, tgts)
        loss.backward()
        for spec in registry:
            head = decoder.out_heads[spec.name]
            assert head.weight.grad is not None
            assert float(head.weight.grad.abs().sum()) > 0
