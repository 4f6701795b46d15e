"""Tissue-gated crop sampling, asymmetric masking, and input-model selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SlideGrid, tissue_coverage

WINDOW = 16
POSITIONS = WINDOW * WINDOW  # 256
VISIBLE = 64
MASKED = POSITIONS - VISIBLE  # 192
COVERAGE_GATE = 0.55


@dataclass(frozen=True)
class CropWindow:
    """One accepted (or fallback) 16x16 window on a slide."""

    slide_id: str
    origin: tuple[int, int]
    valid_positions: np.ndarray  # sorted local indices in [0, 256) with tissue
    coverage: float

    @property
    def size(self) -> int:
        return WINDOW


@dataclass(frozen=True)
class CropBatch:
    """A masked crop ready for the encoder and the reconstruction targets.

    visible_valid marks which of the 64 visible slots carry a real
    embedding of the input model; the rest are zero-filled fillers.
    targets[k] = (local indices M_k, matching target matrix).
    """

    window: CropWindow
    input_model: int
    visible_idx: np.ndarray  # (64,) local indices
    masked_idx: np.ndarray  # (192,) local indices
    visible_embeddings: np.ndarray  # (64, embed_dim of input model)
    visible_valid: np.ndarray  # (64,) bool
    targets: dict[int, tuple[np.ndarray, np.ndarray]]


def local_to_colrow(local_idx: np.ndarray) -> np.ndarray:
    """Local window index (row-major) -> (col, row) pairs in [0, 16)^2."""
    local_idx = np.asarray(local_idx)
    return np.stack([local_idx % WINDOW, local_idx // WINDOW], axis=-1)


def rng_stream(seed: int, slide_id: str, epoch: int) -> np.random.Generator:
    """Independent per-(slide, epoch) stream so parallel workers never collide."""
    sid = np.frombuffer(slide_id.encode("utf-8"), dtype=np.uint8)
    return np.random.default_rng(
        np.random.SeedSequence([seed, epoch, *sid.tolist()])
    )


def sample_window(
    grid: SlideGrid, rng: np.random.Generator, max_tries: int = 10
) -> CropWindow:
    """Draw uniform windows until one clears the 55% tissue gate.

    Returns the first window with coverage >= 0.55; after max_tries
    failures the best-coverage window seen is kept as the fallback.
    """
    if grid.width_cells < WINDOW or grid.height_cells < WINDOW:
        raise ValueError(
            f"slide {grid.slide_id}: lattice {grid.width_cells}x{grid.height_cells} "
            f"smaller than the {WINDOW}x{WINDOW} crop window"
        )
    if max_tries < 1:
        raise ValueError("max_tries must be >= 1")
    best = None
    best_cov = -1.0
    for _ in range(max_tries):
        col0 = int(rng.integers(grid.width_cells - WINDOW + 1))
        row0 = int(rng.integers(grid.height_cells - WINDOW + 1))
        cov = tissue_coverage(grid, (col0, row0), WINDOW)
        if cov >= COVERAGE_GATE:
            return _make_window(grid, (col0, row0), cov)
        if cov > best_cov:
            best_cov = cov
            best = (col0, row0)
    return _make_window(grid, best, best_cov)


def _make_window(grid: SlideGrid, origin: tuple[int, int], coverage: float) -> CropWindow:
    col0, row0 = origin
    sub = grid.tissue_valid[row0 : row0 + WINDOW, col0 : col0 + WINDOW]
    valid = np.flatnonzero(sub.ravel()).astype(np.int64)
    return CropWindow(
        slide_id=grid.slide_id,
        origin=(col0, row0),
        valid_positions=valid,
        coverage=float(coverage),
    )


def apply_mask(
    window: CropWindow, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the 256 positions into 64 visible and 192 masked.

    Visible positions are drawn uniformly without replacement from the
    window's valid set; when fewer than 64 cells are valid, every valid
    cell is revealed and the remainder is padded with invalid positions
    flagged as fillers.

    Returns:
        (visible_idx, masked_idx, filler_flags); filler_flags marks the
        visible slots that do NOT come from the valid set.
    """
    valid = window.valid_positions
    if len(valid) == 0:
        raise ValueError("window has no valid positions to reveal")
    if len(valid) >= VISIBLE:
        visible = rng.choice(valid, size=VISIBLE, replace=False)
        fillers = np.zeros(VISIBLE, dtype=bool)
    else:
        invalid = np.setdiff1d(np.arange(POSITIONS), valid, assume_unique=True)
        pad = rng.choice(invalid, size=VISIBLE - len(valid), replace=False)
        visible = np.concatenate([valid, pad])
        fillers = np.concatenate(
            [np.zeros(len(valid), dtype=bool), np.ones(len(pad), dtype=bool)]
        )
    order = np.argsort(visible)
    visible = visible[order]
    fillers = fillers[order]
    masked = np.setdiff1d(np.arange(POSITIONS), visible, assume_unique=True)
    return visible.astype(np.int64), masked.astype(np.int64), ~fillers


def select_input_model(rng: np.random.Generator, n_models: int) -> int:
    """Uniform draw of the embedding space revealed to the encoder."""
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    return int(rng.integers(n_models))


def make_crop_batch(
    grid: SlideGrid, rng: np.random.Generator, max_tries: int = 10
) -> CropBatch:
    """Sample window, choose input model, mask, and gather all-model targets."""
    window = sample_window(grid, rng, max_tries=max_tries)
    input_model = select_input_model(rng, len(grid.registry))
    visible_idx, masked_idx, visible_valid = apply_mask(window, rng)

    col0, row0 = window.origin
    dim = grid.registry[input_model].embed_dim
    visible_emb = np.zeros((VISIBLE, dim), dtype=np.float32)
    idx_map = grid.row_index(input_model)
    cr = local_to_colrow(visible_idx)
    rows = idx_map[row0 + cr[:, 1], col0 + cr[:, 0]]
    present = rows >= 0
    visible_emb[present] = grid.embeddings(input_model)[rows[present]]
    # A tissue cell the input model does not cover becomes a filler too.
    visible_valid = visible_valid & present

    targets: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    mr = local_to_colrow(masked_idx)
    for spec in grid.registry:
        rows_k = grid.row_index(spec.model_id)[row0 + mr[:, 1], col0 + mr[:, 0]]
        present_k = rows_k >= 0
        mk = masked_idx[present_k]
        targets[spec.model_id] = (
            mk,
            grid.embeddings(spec.model_id)[rows_k[present_k]],
        )
    return CropBatch(
        window=window,
        input_model=input_model,
        visible_idx=visible_idx,
        masked_idx=masked_idx,
        visible_embeddings=visible_emb,
        visible_valid=visible_valid,
        targets=targets,
    )
