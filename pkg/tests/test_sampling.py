"""Window sampling, asymmetric masking, and crop-batch assembly."""

import numpy as np
import pytest

from astralab.grid import GridSpec, build_shared_grid
from astralab.registry import desk_registry
from astralab.sampling import (
    COVERAGE_GATE,
    MASKED,
    POSITIONS,
    VISIBLE,
    CropWindow,
    apply_mask,
    make_crop_batch,
    rng_stream,
    sample_window,
    select_input_model,
)
from astralab.synth import SynthConfig, generate_synthetic_slide


@pytest.fixture(scope="module")
def registry():
    return desk_registry()


def block_grid(registry, width, height, tissue_cells):
    """Grid of given size whose anchor covers exactly tissue_cells."""
    tiles = []
    dim = registry[2].embed_dim
    for (col, row) in tissue_cells:
        tiles.append((2, (col * 512, row * 512), np.ones(dim, dtype=np.float32)))
    # pin the lattice corner with a non-anchor tile
    tiles.append((0, ((width - 1) * 512, (height - 1) * 512), np.ones(registry[0].embed_dim, dtype=np.float32)))
    return build_shared_grid(tiles, GridSpec(), registry)


def full_grid(registry, size=20):
    cells = [(c, r) for r in range(size) for c in range(size)]
    return block_grid(registry, size, size, cells)


class TestSampleWindow:
    def test_full_tissue_accepts_first_draw(self, registry):
        grid = full_grid(registry)
        rng = np.random.default_rng(0)
        win = sample_window(grid, rng)
        assert win.coverage == 1.0
        assert len(win.valid_positions) == POSITIONS

    def test_all_background_falls_back_after_exact_tries(self, registry):
        grid = block_grid(registry, 20, 20, [])
        rng = np.random.default_rng(1)
        probe = np.random.default_rng(1)
        win = sample_window(grid, rng, max_tries=10)
        assert win.coverage == 0.0
        # exactly 10 draws of 2 integers each were consumed
        for _ in range(20):
            probe.integers(grid.width_cells - 16 + 1)
        assert rng.bit_generator.state == probe.bit_generator.state

    def test_small_grid_rejected(self, registry):
        grid = block_grid(registry, 8, 8, [(0, 0)])
        with pytest.raises(ValueError, match="smaller"):
            sample_window(grid, np.random.default_rng(0))

    def test_acceptance_matches_enumeration(self, registry):
        # one 16x16 tissue block inside a 22x22 lattice
        block = [(c, r) for r in range(3, 19) for c in range(2, 18)]
        grid = block_grid(registry, 22, 22, block)
        n_origins = 22 - 16 + 1
        accept = np.zeros((n_origins, n_origins), dtype=bool)
        for r0 in range(n_origins):
            for c0 in range(n_origins):
                overlap_c = max(0, min(c0 + 16, 18) - max(c0, 2))
                overlap_r = max(0, min(r0 + 16, 19) - max(r0, 3))
                accept[r0, c0] = (overlap_c * overlap_r) / 256 >= COVERAGE_GATE
        expected_rate = accept.mean()

        rng = np.random.default_rng(7)
        hits = 0
        n = 1000
        for _ in range(n):
            win = sample_window(grid, rng, max_tries=1)
            c0, r0 = win.origin
            if win.coverage >= COVERAGE_GATE:
                hits += 1
                assert accept[r0, c0]
            # every returned window overlapping check
            overlap_c = max(0, min(c0 + 16, 18) - max(c0, 2))
            overlap_r = max(0, min(r0 + 16, 19) - max(r0, 3))
            assert win.coverage == pytest.approx(overlap_c * overlap_r / 256)
        # single-try acceptance frequency approximates the enumerated rate
        assert hits / n == pytest.approx(expected_rate, abs=4 * np.sqrt(expected_rate * (1 - expected_rate) / n))


class TestApplyMask:
    def _window(self, valid_positions):
        return CropWindow(
            slide_id="s",
            origin=(0, 0),
            valid_positions=np.asarray(sorted(valid_positions), dtype=np.int64),
            coverage=len(valid_positions) / POSITIONS,
        )

    def test_partition_sizes(self):
        rng = np.random.default_rng(0)
        win = self._window(range(POSITIONS))
        vis, masked, valid_flags = apply_mask(win, rng)
        assert len(vis) == VISIBLE and len(masked) == MASKED
        assert valid_flags.all()
        union = np.union1d(vis, masked)
        assert np.array_equal(union, np.arange(POSITIONS))
        assert len(np.intersect1d(vis, masked)) == 0

    def test_visible_subset_of_valid_when_enough(self):
        rng = np.random.default_rng(1)
        win = self._window(range(0, 200))
        vis, _, flags = apply_mask(win, rng)
        assert set(vis) <= set(range(200))
        assert flags.all()

    def test_forced_fillers_when_few_valid(self):
        rng = np.random.default_rng(2)
        win = self._window(range(40))
        vis, masked, flags = apply_mask(win, rng)
        assert len(vis) == VISIBLE and len(masked) == MASKED
        assert set(range(40)) <= set(vis)
        assert flags.sum() == 40
        assert (~flags).sum() == 24

    def test_empty_valid_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            apply_mask(self._window([]), rng)

    def test_uniform_marginal_frequency(self):
        # each position visible with frequency ~ 64/256 = 0.25
        rng = np.random.default_rng(4)
        win = self._window(range(POSITIONS))
        counts = np.zeros(POSITIONS)
        n = 10_000
        for _ in range(n):
            vis, _, _ = apply_mask(win, rng)
            counts[vis] += 1
        freq = counts / n
        assert np.all(np.abs(freq - 0.25) < 0.02)


class TestSelectInputModel:
    def test_single_model_always_zero(self):
        rng = np.random.default_rng(0)
        assert all(select_input_model(rng, 1) == 0 for _ in range(10))

    def test_uniform_over_four(self):
        rng = np.random.default_rng(1)
        n = 100_000
        draws = np.array([select_input_model(rng, 4) for _ in range(n)])
        for m in range(4):
            assert abs((draws == m).mean() - 0.25) < 0.01

    def test_seeded_reproducibility(self):
        a = [select_input_model(np.random.default_rng(7), 4) for _ in range(5)]
        b = [select_input_model(np.random.default_rng(7), 4) for _ in range(5)]
        assert a == b

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            select_input_model(np.random.default_rng(0), 0)


class TestMakeCropBatch:
    def test_full_tissue_all_models_full_targets(self):
        cfg = SynthConfig(registry=desk_registry(), lattice=20, sigma=0.0,
                          tissue_fraction=2.0)  # foreground covers everything
        grid = generate_synthetic_slide(cfg, seed=5, profile_index=0)
        assert grid.n_tissue_cells == 400
        rng = np.random.default_rng(0)
        batch = make_crop_batch(grid, rng)
        for m in range(4):
            mk, tgt = batch.targets[m]
            assert len(mk) == MASKED
            assert tgt.shape == (MASKED, grid.registry[m].embed_dim)

    def test_dropout_model_targets_match_direct_count(self):
        cfg = SynthConfig(registry=desk_registry(), lattice=20, sigma=0.0,
                          tissue_fraction=2.0, model_dropout=0.5)
        grid = generate_synthetic_slide(cfg, seed=5, profile_index=0)
        rng = np.random.default_rng(1)
        batch = make_crop_batch(grid, rng)
        col0, row0 = batch.window.origin
        for m in range(4):
            mk, tgt = batch.targets[m]
            expected = sum(
                1
                for idx in batch.masked_idx
                if grid.has_cell(m, col0 + int(idx % 16), row0 + int(idx // 16))
            )
            assert len(mk) == expected <= MASKED
            assert set(mk) <= set(batch.masked_idx)

    def test_sigma_zero_targets_equal_planted_map(self):
        cfg = SynthConfig(registry=desk_registry(), lattice=20, sigma=0.0,
                          tissue_fraction=2.0)
        grid = generate_synthetic_slide(cfg, seed=5, profile_index=0)
        from astralab.synth import universe_for

        uni = universe_for(cfg)
        rng = np.random.default_rng(2)
        batch = make_crop_batch(grid, rng)
        col0, row0 = batch.window.origin
        mk, tgt = batch.targets[1]
        protos = {
            a: uni.clean_embedding(1, a).astype(np.float32) for a in range(cfg.archetypes)
        }
        for idx, vector in zip(mk[:20], tgt[:20]):
            dists = [np.abs(vector - p).max() for p in protos.values()]
            assert min(dists) < 1e-5

    def test_determinism(self):
        cfg = SynthConfig(registry=desk_registry(), lattice=20, sigma=0.1)
        grid = generate_synthetic_slide(cfg, seed=5)
        a = make_crop_batch(grid, rng_stream(3, grid.slide_id, 0))
        b = make_crop_batch(grid, rng_stream(3, grid.slide_id, 0))
        assert a.window.origin == b.window.origin
        assert a.input_model == b.input_model
        np.testing.assert_array_equal(a.visible_idx, b.visible_idx)
        np.testing.assert_array_equal(a.visible_embeddings, b.visible_embeddings)

    def test_mask_partition_invariant_over_many_draws(self):
        cfg = SynthConfig(registry=desk_registry(), lattice=20, sigma=0.0)
        grid = generate_synthetic_slide(cfg, seed=5)
        rng = np.random.default_rng(9)
        for _ in range(200):
            batch = make_crop_batch(grid, rng)
            assert len(batch.visible_idx) == VISIBLE
            assert len(batch.masked_idx) == MASKED
            assert len(np.intersect1d(batch.visible_idx, batch.masked_idx)) == 0
