"""Image emission: similarity heatmaps with overlays and expert partition maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .evaluation import LocalizationResult
from .grid import RegionLabel, SlideGrid
from .routing import ExpertMap

# Fixed blue -> white -> red diverging map over s in [-1, 1].
_BG_GRAY = (40, 40, 40)

EXPERT_PALETTE = [
    (230, 75, 60),  # red
    (60, 120, 216),  # blue
    (60, 180, 90),  # green
    (240, 180, 40),  # amber
    (150, 80, 190),  # purple
    (90, 200, 200),  # teal
    (240, 120, 180),  # pink
    (140, 140, 60),  # olive
]


def _heat_rgb(sim: np.ndarray) -> np.ndarray:
    """(H, W) similarities in [-1, 1] -> (H, W, 3) uint8; NaN -> background gray."""
    h, w = sim.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    rgb[:] = _BG_GRAY
    ok = np.isfinite(sim)
    x = np.clip(sim[ok], -1.0, 1.0)
    r = np.where(x >= 0, 255, (1 + x) * 255)
    b = np.where(x <= 0, 255, (1 - x) * 255)
    g = (1 - np.abs(x)) * 255
    rgb[ok] = np.stack([r, g, b], axis=-1).astype(np.uint8)
    return rgb


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def _contour(mask: np.ndarray) -> np.ndarray:
    """Boundary cells of a boolean region (4-neighborhood)."""
    padded = np.pad(mask, 1)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def heatmap_image(
    result: LocalizationResult, grid: SlideGrid, cell_px: int = 8
) -> Image.Image:
    """Three panels: similarity heatmap, thresholded mask, heatmap + truth contour."""
    heat = _heat_rgb(result.similarity)

    mask_rgb = np.zeros_like(heat)
    mask_rgb[:] = _BG_GRAY
    mask_rgb[grid.tissue_valid] = (70, 70, 70)
    mask_rgb[result.mask] = (255, 255, 255)

    overlay = heat.copy()
    if grid.planted_labels is not None:
        truth = grid.planted_labels == RegionLabel.TUMOR
        overlay[_contour(truth)] = (0, 255, 0)

    gap = np.zeros((heat.shape[0], 1, 3), dtype=np.uint8)
    gap[:] = 255
    panel = np.concatenate([heat, gap, mask_rgb, gap, overlay], axis=1)
    return Image.fromarray(_upscale(panel, cell_px))


def save_heatmap(result: LocalizationResult, grid: SlideGrid, path, cell_px: int = 8) -> None:
    heatmap_image(result, grid, cell_px).save(Path(path), format="PNG")


def expert_map_image(emap: ExpertMap, cell_px: int = 8, legend_rows: int = 2) -> Image.Image:
    """Indexed-color partition map with a legend strip of the expert palette.

    Palette index 0 is background; expert e renders as index e + 1.
    """
    if emap.n_experts > len(EXPERT_PALETTE):
        raise ValueError(f"palette holds {len(EXPERT_PALETTE)} experts")
    h, w = emap.smoothed.shape
    idx = np.zeros((h, w), dtype=np.uint8)
    on = emap.smoothed >= 0
    idx[on] = emap.smoothed[on].astype(np.uint8) + 1

    idx = _upscale(idx, cell_px)
    legend = np.zeros((legend_rows * cell_px, idx.shape[1]), dtype=np.uint8)
    seg = max(1, idx.shape[1] // max(emap.n_experts, 1))
    for e in range(emap.n_experts):
        legend[:, e * seg : (e + 1) * seg] = e + 1
    full = np.concatenate([legend, idx], axis=0)

    img = Image.fromarray(full, mode="P")
    palette = list(_BG_GRAY)
    for e in range(len(EXPERT_PALETTE)):
        palette.extend(EXPERT_PALETTE[e])
    img.putpalette(palette + [0] * (768 - len(palette) - 3))
    return img


def save_expert_map(emap: ExpertMap, path, cell_px: int = 8) -> None:
    expert_map_image(emap, cell_px).save(Path(path), format="PNG")


def save_exemplar_table(
    exemplars: dict[int, list[tuple[str, tuple[int, int], float]]], path
) -> None:
    """Sidecar text table of per-expert exemplar coordinates."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("expert\trank\tslide_id\tcol\trow\ttop1_prob\n")
        for e in sorted(exemplars):
            for rank, (sid, (col, row), prob) in enumerate(exemplars[e]):
                f.write(f"{e}\t{rank}\t{sid}\t{col}\t{row}\t{prob:.6f}\n")
