"""Expert-routing analysis: slide partition maps and per-expert exemplar tiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SlideGrid


@dataclass
class ExpertMap:
    """Final-block top-1 routing per tissue cell, raw and smoothed.

    Arrays are (H, W); -1 marks non-tissue cells.
    """

    slide_id: str
    raw: np.ndarray  # int16 expert ids
    smoothed: np.ndarray  # int16 expert ids
    top1_prob: np.ndarray  # float32, NaN off tissue
    margin: np.ndarray  # float32 top1 - runner-up, NaN off tissue
    n_experts: int


def majority_smooth(raw: np.ndarray, tissue: np.ndarray) -> np.ndarray:
    """3x3 majority vote over tissue neighbors (center included).

    A cell keeps its raw id unless some expert id strictly outnumbers all
    others in its neighborhood; ties keep the center's raw id.
    """
    h, w = raw.shape
    out = raw.copy()
    for r in range(h):
        for c in range(w):
            if not tissue[r, c]:
                continue
            counts: dict[int, int] = {}
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and tissue[rr, cc]:
                        counts[int(raw[rr, cc])] = counts.get(int(raw[rr, cc]), 0) + 1
            best = max(counts.values())
            winners = [e for e, n in counts.items() if n == best]
            out[r, c] = winners[0] if len(winners) == 1 else raw[r, c]
    return out


def expert_map(grid: SlideGrid, model, input_model: int | None = None) -> ExpertMap:
    """Contextualize the slide unmasked and record final-block routing."""
    if model is None or not hasattr(model, "contextualize"):
        raise ValueError("expert_map needs a built model with routing records")
    ctx = model.contextualize(grid, input_model=input_model)
    probs = ctx.final_probs.detach().cpu().numpy()
    if probs.size == 0:
        raise ValueError("no routing records produced for this slide")
    n_experts = probs.shape[1]

    h, w = grid.shape
    raw = np.full((h, w), -1, dtype=np.int16)
    top1 = np.full((h, w), np.nan, dtype=np.float32)
    margin = np.full((h, w), np.nan, dtype=np.float32)
    order = np.argsort(probs, axis=1)[:, ::-1]
    rows = ctx.cells[:, 1]
    cols = ctx.cells[:, 0]
    raw[rows, cols] = order[:, 0]
    best = probs[np.arange(len(probs)), order[:, 0]]
    top1[rows, cols] = best
    if n_experts > 1:
        runner = probs[np.arange(len(probs)), order[:, 1]]
        margin[rows, cols] = best - runner
    else:
        margin[rows, cols] = best

    smoothed = majority_smooth(raw, grid.tissue_valid)
    return ExpertMap(
        slide_id=grid.slide_id,
        raw=raw,
        smoothed=smoothed,
        top1_prob=top1,
        margin=margin,
        n_experts=n_experts,
    )


def top_tiles_per_expert(
    maps: list[ExpertMap], m: int, margin_floor: float = 0.2
) -> dict[int, list[tuple[str, tuple[int, int], float]]]:
    """Per expert, the m most confident cells with margin above the floor.

    Returns expert id -> [(slide_id, (col, row), top1_prob)], sorted by
    probability descending; experts with no qualifying cell map to [].
    """
    if not maps:
        raise ValueError("need at least one expert map")
    n_experts = maps[0].n_experts
    pools: dict[int, list[tuple[float, str, tuple[int, int]]]] = {
        e: [] for e in range(n_experts)
    }
    for emap in maps:
        rows, cols = np.nonzero(emap.raw >= 0)
        for r, c in zip(rows, cols):
            mg = float(emap.margin[r, c])
            if not np.isfinite(mg) or mg <= margin_floor:
                continue
            e = int(emap.raw[r, c])
            pools[e].append((float(emap.top1_prob[r, c]), emap.slide_id, (int(c), int(r))))
    out = {}
    for e, pool in pools.items():
        pool.sort(key=lambda item: (-item[0], item[1], item[2]))
        out[e] = [(sid, cell, prob) for prob, sid, cell in pool[:m]]
    return out
