"""Shared spatial grid: aligned multi-model tile embeddings on an integer lattice."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .registry import ModelRegistry


class Category(IntEnum):
    """Slide-level classification category."""

    MALIGNANT = 0
    NORMAL_ADJACENT = 1
    BENIGN = 2
    NORMAL = 3


# Categories whose prompt template takes a cancer-type slot.
TYPED_CATEGORIES = (Category.MALIGNANT, Category.BENIGN)


class RegionLabel(IntEnum):
    """Planted per-cell region label for synthetic slides."""

    TUMOR = 0
    BENIGN_EPITHELIUM = 1
    STROMA = 2
    BACKGROUND = 3


@dataclass(frozen=True)
class SlideRecord:
    """Structured annotation fields attached to one slide.

    cancer_type is present exactly for Malignant and Benign slides; the
    other two categories are described by site alone.
    """

    classification_category: Category
    anatomic_site: str
    cancer_type: str | None = None

    def __post_init__(self):
        typed = self.classification_category in TYPED_CATEGORIES
        if typed and not self.cancer_type:
            raise ValueError(
                f"{self.classification_category.name} record requires a cancer_type"
            )
        if not typed and self.cancer_type is not None:
            raise ValueError(
                f"{self.classification_category.name} record must not carry a cancer_type"
            )
        if not self.anatomic_site:
            raise ValueError("anatomic_site must be non-empty")


@dataclass(frozen=True)
class GridSpec:
    """Anchor lattice geometry. Cell = floor(pixel_xy / stride_px)."""

    stride_px: int = 512
    magnification_tag: str = "20x"

    def __post_init__(self):
        if self.stride_px <= 0:
            raise ValueError(f"stride_px must be positive, got {self.stride_px}")


class SlideGrid:
    """Immutable per-slide lattice of aligned multi-model embeddings.

    Per model the embeddings are stored sparsely as a cell table plus a
    row-major matrix, with a dense (H, W) row-index map for O(1) lookup.
    Cell coordinates are (col, row).
    """

    def __init__(
        self,
        slide_id: str,
        width_cells: int,
        height_cells: int,
        registry: ModelRegistry,
        per_model_cells: dict[int, np.ndarray],
        per_model_embeddings: dict[int, np.ndarray],
        record: SlideRecord | None = None,
        planted_labels: np.ndarray | None = None,
    ):
        self.slide_id = slide_id
        self.width_cells = int(width_cells)
        self.height_cells = int(height_cells)
        self.registry = registry
        self.record = record
        self._cells = {}
        self._emb = {}
        self._index = {}

        for spec in registry:
            cells = per_model_cells.get(spec.model_id)
            emb = per_model_embeddings.get(spec.model_id)
            if cells is None or len(cells) == 0:
                cells = np.zeros((0, 2), dtype=np.int32)
                emb = np.zeros((0, spec.embed_dim), dtype=np.float32)
            cells = np.asarray(cells, dtype=np.int32)
            emb = np.asarray(emb, dtype=np.float32)
            if emb.shape != (len(cells), spec.embed_dim):
                raise ValueError(
                    f"model {spec.model_id} ({spec.name}): embedding block "
                    f"{emb.shape} does not match {len(cells)} cells x {spec.embed_dim} dims"
                )
            index = np.full((self.height_cells, self.width_cells), -1, dtype=np.int64)
            if len(cells):
                if cells.min() < 0:
                    raise ValueError(f"model {spec.model_id}: negative cell coordinate")
                if cells[:, 0].max() >= self.width_cells or cells[:, 1].max() >= self.height_cells:
                    raise ValueError(f"model {spec.model_id}: cell outside lattice bounds")
                index[cells[:, 1], cells[:, 0]] = np.arange(len(cells))
            self._cells[spec.model_id] = cells
            self._emb[spec.model_id] = emb
            self._index[spec.model_id] = index

        anchor_id = registry.anchor.model_id
        self.tissue_valid = self._index[anchor_id] >= 0

        if planted_labels is not None:
            planted_labels = np.asarray(planted_labels, dtype=np.int8)
            if planted_labels.shape != (self.height_cells, self.width_cells):
                raise ValueError(
                    f"planted_labels shape {planted_labels.shape} does not match "
                    f"lattice ({self.height_cells}, {self.width_cells})"
                )
            labelled = planted_labels != RegionLabel.BACKGROUND
            if not np.array_equal(labelled, self.tissue_valid):
                raise ValueError("planted_labels must cover exactly the tissue_valid cells")
        self.planted_labels = planted_labels

        for arr in list(self._cells.values()) + list(self._emb.values()):
            arr.setflags(write=False)
        self.tissue_valid.setflags(write=False)
        if self.planted_labels is not None:
            self.planted_labels.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_cells, self.width_cells)

    @property
    def n_tissue_cells(self) -> int:
        return int(self.tissue_valid.sum())

    def cells(self, model_id: int) -> np.ndarray:
        """(N, 2) int32 table of (col, row) cells where this model has tissue."""
        return self._cells[model_id]

    def embeddings(self, model_id: int) -> np.ndarray:
        """(N, embed_dim) float32 matrix aligned with cells(model_id)."""
        return self._emb[model_id]

    def has_cell(self, model_id: int, col: int, row: int) -> bool:
        return bool(self._index[model_id][row, col] >= 0)

    def vector(self, model_id: int, col: int, row: int) -> np.ndarray:
        i = self._index[model_id][row, col]
        if i < 0:
            raise KeyError(f"model {model_id} has no embedding at cell ({col}, {row})")
        return self._emb[model_id][i]

    def row_index(self, model_id: int) -> np.ndarray:
        """(H, W) int64 map cell -> row in embeddings(model_id), -1 where absent."""
        return self._index[model_id]

    def window_rows(self, model_id: int, origin: tuple[int, int], size: int = 16):
        """Gather a size x size window for one model.

        Returns (local_idx, rows): local indices (row-major within the
        window) of the cells this model covers, and the matching rows of
        its embedding matrix.
        """
        col0, row0 = origin
        sub = self._index[model_id][row0 : row0 + size, col0 : col0 + size]
        local = np.flatnonzero(sub.ravel() >= 0)
        rows = sub.ravel()[local]
        return local.astype(np.int64), self._emb[model_id][rows]

    def __repr__(self) -> str:
        return (
            f"SlideGrid({self.slide_id!r}, {self.width_cells}x{self.height_cells} cells, "
            f"{self.n_tissue_cells} tissue)"
        )


def build_shared_grid(
    raw_tiles: list[tuple[int, tuple[int, int], np.ndarray]],
    grid: GridSpec,
    registry: ModelRegistry,
    anchor_model: int | None = None,
    record: SlideRecord | None = None,
    slide_id: str = "slide",
) -> SlideGrid:
    """Align heterogeneous native-resolution tiles onto the anchor lattice.

    Tiles are assigned to the cell containing their top-left pixel corner;
    tiles of one model landing in the same cell are average-pooled. A cell
    is tissue-valid iff the anchor model contributed at least one tile.

    Args:
        raw_tiles: (model_id, (x_px, y_px), vector) triples.
        grid: lattice geometry.
        registry: the model registry the tiles belong to.
        anchor_model: model_id overriding the registry's anchor designation.

    Returns:
        SlideGrid covering max observed cell index + 1 in each direction;
        empty input yields an empty 0x0 grid.
    """
    if anchor_model is not None and anchor_model != registry.anchor.model_id:
        from .registry import ModelRegistry as _Reg

        registry = _Reg(registry.specs, anchor_name=registry[anchor_model].name)
    stride = grid.stride_px
    sums: dict[int, dict[tuple[int, int], np.ndarray]] = {s.model_id: {} for s in registry}
    counts: dict[int, dict[tuple[int, int], int]] = {s.model_id: {} for s in registry}
    max_col = -1
    max_row = -1

    for model_id, (x_px, y_px), vec in raw_tiles:
        if model_id not in sums:
            raise ValueError(f"tile references unknown model_id {model_id}")
        if x_px < 0 or y_px < 0:
            raise ValueError(f"model {model_id}: negative pixel coordinate ({x_px}, {y_px})")
        vec = np.asarray(vec, dtype=np.float64)
        want = registry[model_id].embed_dim
        if vec.shape != (want,):
            raise ValueError(
                f"model {model_id}: vector of length {vec.shape} does not match "
                f"embed_dim {want}"
            )
        cell = (x_px // stride, y_px // stride)
        max_col = max(max_col, cell[0])
        max_row = max(max_row, cell[1])
        bucket = sums[model_id]
        if cell in bucket:
            bucket[cell] = bucket[cell] + vec
            counts[model_id][cell] += 1
        else:
            bucket[cell] = vec
            counts[model_id][cell] = 1

    width = max_col + 1
    height = max_row + 1
    per_model_cells = {}
    per_model_emb = {}
    for spec in registry:
        bucket = sums[spec.model_id]
        if not bucket:
            continue
        cells = sorted(bucket.keys(), key=lambda c: (c[1], c[0]))
        emb = np.stack(
            [bucket[c] / counts[spec.model_id][c] for c in cells]
        ).astype(np.float32)
        per_model_cells[spec.model_id] = np.asarray(cells, dtype=np.int32)
        per_model_emb[spec.model_id] = emb

    return SlideGrid(
        slide_id=slide_id,
        width_cells=max(width, 0),
        height_cells=max(height, 0),
        registry=registry,
        per_model_cells=per_model_cells,
        per_model_embeddings=per_model_emb,
        record=record,
    )


def tissue_coverage(grid: SlideGrid, origin: tuple[int, int], size: int = 16) -> float:
    """Fraction of tissue-valid cells inside a size x size window."""
    col0, row0 = origin
    if col0 < 0 or row0 < 0 or col0 + size > grid.width_cells or row0 + size > grid.height_cells:
        raise ValueError(
            f"window origin ({col0}, {row0}) size {size} exceeds lattice "
            f"{grid.width_cells}x{grid.height_cells}"
        )
    sub = grid.tissue_valid[row0 : row0 + size, col0 : col0 + size]
    return float(sub.sum()) / float(size * size)
