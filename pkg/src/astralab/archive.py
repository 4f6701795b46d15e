"""On-disk slide archive: one directory per slide.

Layout::

    <root>/<slide_id>/
        manifest.txt      key=value text (slide identity, lattice, record, registry)
        labels.bin        planted region labels, present for synthetic slides
        model_<name>.bin  per-model embedding block

``model_<name>.bin`` is little-endian binary: ``u64 n_cells``, then the
cell-index table as ``n_cells`` pairs of ``u32 (col, row)``, then the
row-major ``float32`` embedding matrix ``n_cells x embed_dim`` aligned with
the table. ``labels.bin`` is ``u64 n_cells`` cell pairs followed by one
``u8`` region label per cell.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .grid import Category, RegionLabel, SlideGrid, SlideRecord
from .registry import ModelRegistry, ModelSpec

MANIFEST_NAME = "manifest.txt"
LABELS_NAME = "labels.bin"


def _write_kv(path: Path, pairs: list[tuple[str, str]]) -> None:
    lines = [f"{k} = {v}" for k, v in pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_kv(path: Path) -> dict[str, str]:
    out = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _write_cell_block(path: Path, cells: np.ndarray, payload: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(np.uint64(len(cells)).tobytes())
        f.write(cells.astype("<u4").tobytes())
        f.write(payload.tobytes())


def save_slide(grid: SlideGrid, root: str | os.PathLike) -> Path:
    """Write one slide directory under root; returns its path."""
    slide_dir = Path(root) / grid.slide_id
    slide_dir.mkdir(parents=True, exist_ok=True)

    pairs = [
        ("format", "astralab-slide/1"),
        ("slide_id", grid.slide_id),
        ("width_cells", str(grid.width_cells)),
        ("height_cells", str(grid.height_cells)),
        ("models", str(len(grid.registry))),
        ("anchor", grid.registry.anchor_name),
    ]
    for spec in grid.registry:
        pairs.append(
            (f"model_{spec.model_id}", f"{spec.name},{spec.native_tile_px},{spec.embed_dim}")
        )
    if grid.record is not None:
        rec = grid.record
        pairs.append(("category", rec.classification_category.name))
        pairs.append(("anatomic_site", rec.anatomic_site))
        if rec.cancer_type is not None:
            pairs.append(("cancer_type", rec.cancer_type))
    pairs.append(("has_labels", "1" if grid.planted_labels is not None else "0"))
    _write_kv(slide_dir / MANIFEST_NAME, pairs)

    for spec in grid.registry:
        cells = grid.cells(spec.model_id)
        emb = grid.embeddings(spec.model_id).astype("<f4")
        _write_cell_block(slide_dir / f"model_{spec.name}.bin", cells, emb)

    if grid.planted_labels is not None:
        rows, cols = np.nonzero(grid.tissue_valid)
        cells = np.stack([cols, rows], axis=1)
        lab = grid.planted_labels[rows, cols].astype(np.uint8)
        _write_cell_block(slide_dir / LABELS_NAME, cells, lab)
    return slide_dir


def load_slide(slide_dir: str | os.PathLike) -> SlideGrid:
    """Read one slide directory back into a SlideGrid."""
    slide_dir = Path(slide_dir)
    manifest = _read_kv(slide_dir / MANIFEST_NAME)
    if manifest.get("format") != "astralab-slide/1":
        raise ValueError(f"{slide_dir}: unknown archive format {manifest.get('format')!r}")

    n_models = int(manifest["models"])
    specs = []
    for mid in range(n_models):
        name, tile_px, dim = manifest[f"model_{mid}"].split(",")
        specs.append(ModelSpec(mid, name, int(tile_px), int(dim)))
    registry = ModelRegistry(specs, anchor_name=manifest["anchor"])

    width = int(manifest["width_cells"])
    height = int(manifest["height_cells"])

    record = None
    if "category" in manifest:
        record = SlideRecord(
            classification_category=Category[manifest["category"]],
            anatomic_site=manifest["anatomic_site"],
            cancer_type=manifest.get("cancer_type"),
        )

    per_cells = {}
    per_emb = {}
    for spec in registry:
        raw = (slide_dir / f"model_{spec.name}.bin").read_bytes()
        n = int(np.frombuffer(raw, dtype="<u8", count=1)[0])
        off = 8
        cells = np.frombuffer(raw, dtype="<u4", count=2 * n, offset=off).reshape(n, 2)
        off += 8 * n
        emb = np.frombuffer(raw, dtype="<f4", count=n * spec.embed_dim, offset=off)
        per_cells[spec.model_id] = cells.astype(np.int32)
        per_emb[spec.model_id] = emb.reshape(n, spec.embed_dim).copy()

    labels = None
    if manifest.get("has_labels") == "1":
        raw = (slide_dir / LABELS_NAME).read_bytes()
        n = int(np.frombuffer(raw, dtype="<u8", count=1)[0])
        cells = np.frombuffer(raw, dtype="<u4", count=2 * n, offset=8).reshape(n, 2)
        lab = np.frombuffer(raw, dtype=np.uint8, count=n, offset=8 + 8 * n)
        labels = np.full((height, width), RegionLabel.BACKGROUND, dtype=np.int8)
        labels[cells[:, 1], cells[:, 0]] = lab.astype(np.int8)

    return SlideGrid(
        slide_id=manifest["slide_id"],
        width_cells=width,
        height_cells=height,
        registry=registry,
        per_model_cells=per_cells,
        per_model_embeddings=per_emb,
        record=record,
        planted_labels=labels,
    )


def save_cohort(slides: list[SlideGrid], root: str | os.PathLike) -> Path:
    """Write all slides plus a cohort listing."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for grid in slides:
        save_slide(grid, root)
        ids.append(grid.slide_id)
    pairs = [("format", "astralab-cohort/1"), ("slides", str(len(ids)))]
    pairs += [(f"slide_{i}", sid) for i, sid in enumerate(ids)]
    _write_kv(root / "cohort.txt", pairs)
    return root


def load_cohort(root: str | os.PathLike) -> list[SlideGrid]:
    root = Path(root)
    listing = _read_kv(root / "cohort.txt")
    if listing.get("format") != "astralab-cohort/1":
        raise ValueError(f"{root}: not a cohort directory")
    n = int(listing["slides"])
    return [load_slide(root / listing[f"slide_{i}"]) for i in range(n)]
