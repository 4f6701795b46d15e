"""Slide-level metrics, text-guided localization scoring, and report tables."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.metrics import balanced_accuracy_score, roc_auc_score

from .grid import RegionLabel, SlideGrid


# -- classification ----------------------------------------------------


@dataclass
class LinearHead:
    """Affine map from slide embeddings to class scores."""

    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def classify(slide_embedding: np.ndarray, head: LinearHead) -> np.ndarray:
    """Class scores for one embedding; argmax (lowest index on ties) predicts."""
    emb = np.asarray(slide_embedding, dtype=np.float64)
    if emb.shape != (head.weight.shape[1],):
        raise ValueError(
            f"embedding dim {emb.shape} does not match head input {head.weight.shape[1]}"
        )
    return head.weight @ emb + head.bias


@dataclass(frozen=True)
class MetricSet:
    acc: float
    b_acc: float
    specificity: float
    auc: float

    def as_dict(self) -> dict[str, float]:
        return {
            "acc": self.acc,
            "b_acc": self.b_acc,
            "specificity": self.specificity,
            "auc": self.auc,
        }


def metrics(labels: np.ndarray, scores: np.ndarray, n_classes: int) -> MetricSet:
    """Accuracy, balanced accuracy, macro OvR specificity, macro OvR AUC.

    Predictions are argmax over scores with ties broken toward the lowest
    class index. Per-class AUC needs both positives and negatives; classes
    failing that are skipped with a warning and the macro renormalizes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("metrics need at least one sample")
    if scores.shape != (labels.shape[0], n_classes):
        raise ValueError(
            f"scores shape {scores.shape} does not match ({labels.shape[0]}, {n_classes})"
        )
    preds = np.argmax(scores, axis=1)

    acc = float(np.mean(preds == labels))
    b_acc = float(balanced_accuracy_score(labels, preds))

    spec_terms = []
    for c in range(n_classes):
        negatives = labels != c
        if not negatives.any():
            continue
        false_pos = np.sum(negatives & (preds == c))
        spec_terms.append(1.0 - false_pos / negatives.sum())
    specificity = float(np.mean(spec_terms))

    auc_terms = []
    for c in range(n_classes):
        pos = labels == c
        if not pos.any() or pos.all():
            warnings.warn(
                f"AUC for class {c} skipped: needs both positives and negatives",
                stacklevel=2,
            )
            continue
        auc_terms.append(roc_auc_score(pos.astype(int), scores[:, c]))
    if not auc_terms:
        raise ValueError("AUC undefined: no class has both positives and negatives")
    auc = float(np.mean(auc_terms))
    return MetricSet(acc=acc, b_acc=b_acc, specificity=specificity, auc=auc)


# -- localization ------------------------------------------------------


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """2|A^B| / (|A| + |B|); two empty masks count as a perfect 1.0."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


DEFAULT_EXCLUSION_FLOOR = 0.20


@dataclass
class LocalizationResult:
    slide_id: str
    similarity: np.ndarray  # (H, W) float, NaN off tissue
    mask: np.ndarray  # (H, W) bool, tissue cells only
    threshold: float
    dice: float | None
    excluded: bool
    exclusion_reason: str | None
    reference_coverage: float  # reference tumor cells / tissue cells
    stratum: str | None = None


def localize(
    grid: SlideGrid,
    model,
    prompt_vec: np.ndarray,
    threshold: float = 0.15,
    input_model: int | None = None,
    exclusion_floor: float = DEFAULT_EXCLUSION_FLOOR,
) -> LocalizationResult:
    """Threshold per-tile prompt similarity into a tumor mask and score it.

    Tile states are produced by the unmasked windowed encoder pass,
    projected through the trained slide projection head, unit-normalized,
    and compared to the prompt embedding by inner product. The fixed
    threshold is applied with no per-slide normalization. Dice is scored
    against the planted tumor cells when the slide carries labels and the
    reference covers at least exclusion_floor of the tissue.
    """
    if model.abmil is None:
        raise ValueError("model has no trained slide projection head; run alignment first")
    prompt = np.asarray(prompt_vec, dtype=np.float64)
    norm = np.linalg.norm(prompt)
    if abs(norm - 1.0) > 1e-5:
        raise ValueError(f"prompt vector must be unit-norm, got |t| = {norm:.6f}")

    ctx = model.contextualize(grid, input_model=input_model)
    with torch.no_grad():
        tiles = model.abmil.project_tiles(ctx.states)
        sims = tiles @ torch.as_tensor(prompt, dtype=tiles.dtype)
    sims = sims.cpu().numpy().astype(np.float64)

    h, w = grid.shape
    similarity = np.full((h, w), np.nan)
    similarity[ctx.cells[:, 1], ctx.cells[:, 0]] = sims
    mask = np.zeros((h, w), dtype=bool)
    mask[ctx.cells[:, 1], ctx.cells[:, 0]] = sims >= threshold

    dice_value = None
    excluded = False
    reason = None
    coverage = 0.0
    if grid.planted_labels is not None:
        reference = grid.planted_labels == RegionLabel.TUMOR
        n_tissue = grid.n_tissue_cells
        coverage = float(reference.sum()) / max(n_tissue, 1)
        if coverage < exclusion_floor:
            excluded = True
            reason = (
                f"reference tumor covers {coverage:.1%} of tissue, "
                f"below the {exclusion_floor:.0%} floor"
            )
        else:
            dice_value = dice(mask, reference)
    else:
        excluded = True
        reason = "no reference labels on slide"

    stratum = None
    if grid.record is not None:
        stratum = grid.record.cancer_type or grid.record.classification_category.name.lower()
    return LocalizationResult(
        slide_id=grid.slide_id,
        similarity=similarity,
        mask=mask,
        threshold=threshold,
        dice=dice_value,
        excluded=excluded,
        exclusion_reason=reason,
        reference_coverage=coverage,
        stratum=stratum,
    )


# -- reports -----------------------------------------------------------


@dataclass
class DiceRow:
    stratum: str
    n: int
    mean: float
    sd: float
    median: float


@dataclass
class DiceReport:
    rows: list[DiceRow]
    overall: DiceRow | None
    macro_mean: float | None
    excluded: list[tuple[str, str]]  # (slide_id, reason)
    no_evaluable: bool = False

    def to_text(self) -> str:
        lines = [f"{'stratum':<28}{'n':>5}{'mean':>9}{'sd':>9}{'median':>9}"]
        for r in self.rows:
            lines.append(
                f"{r.stratum:<28}{r.n:>5}{r.mean:>9.3f}{r.sd:>9.3f}{r.median:>9.3f}"
            )
        if self.overall is not None:
            o = self.overall
            lines.append(f"{'overall':<28}{o.n:>5}{o.mean:>9.3f}{o.sd:>9.3f}{o.median:>9.3f}")
        if self.macro_mean is not None:
            lines.append(f"{'macro':<28}{'-':>5}{self.macro_mean:>9.3f}")
        if self.no_evaluable:
            lines.append("no evaluable slides")
        for sid, reason in self.excluded:
            lines.append(f"excluded {sid}: {reason}")
        return "\n".join(lines)

    def to_kv(self) -> list[tuple[str, str]]:
        pairs = []
        for r in self.rows:
            key = r.stratum.replace(" ", "_")
            pairs.append((f"stratum.{key}.n", str(r.n)))
            pairs.append((f"stratum.{key}.mean", repr(r.mean)))
            pairs.append((f"stratum.{key}.sd", repr(r.sd)))
            pairs.append((f"stratum.{key}.median", repr(r.median)))
        if self.overall is not None:
            pairs.append(("overall.n", str(self.overall.n)))
            pairs.append(("overall.mean", repr(self.overall.mean)))
            pairs.append(("overall.sd", repr(self.overall.sd)))
            pairs.append(("overall.median", repr(self.overall.median)))
        if self.macro_mean is not None:
            pairs.append(("macro.mean", repr(self.macro_mean)))
        pairs.append(("excluded", str(len(self.excluded))))
        pairs.append(("no_evaluable", "1" if self.no_evaluable else "0"))
        return pairs


def stratified_summary(
    results: list[LocalizationResult],
    strata: dict[str, str] | None = None,
    exclusion_floor: float = DEFAULT_EXCLUSION_FLOOR,
) -> DiceReport:
    """Per-stratum Dice rows plus pooled overall and unweighted macro rows.

    Slides whose reference tumor mask covers less than exclusion_floor of
    tissue are dropped and listed with their reason.
    """
    kept: dict[str, list[float]] = {}
    pooled: list[float] = []
    excluded: list[tuple[str, str]] = []
    for res in results:
        if res.reference_coverage < exclusion_floor or res.excluded or res.dice is None:
            reason = res.exclusion_reason or (
                f"reference tumor covers {res.reference_coverage:.1%} of tissue, "
                f"below the {exclusion_floor:.0%} floor"
            )
            excluded.append((res.slide_id, reason))
            continue
        stratum = (
            strata.get(res.slide_id) if strata is not None else None
        ) or res.stratum or "unstratified"
        kept.setdefault(stratum, []).append(res.dice)
        pooled.append(res.dice)

    if not pooled:
        return DiceReport(rows=[], overall=None, macro_mean=None,
                          excluded=excluded, no_evaluable=True)

    def row(name: str, values: list[float]) -> DiceRow:
        arr = np.asarray(values, dtype=np.float64)
        return DiceRow(
            stratum=name,
            n=len(values),
            mean=float(arr.mean()),
            sd=float(arr.std(ddof=0)),
            median=float(np.median(arr)),
        )

    rows = [row(name, vals) for name, vals in sorted(kept.items())]
    overall = row("overall", pooled)
    macro = float(np.mean([r.mean for r in rows]))
    return DiceReport(rows=rows, overall=overall, macro_mean=macro, excluded=excluded)


@dataclass
class EvalReport:
    """Per-seed classification metrics with the mean +/- std summary row."""

    task: str
    representation: str
    seed_rows: list[tuple[int, MetricSet]] = field(default_factory=list)

    def add(self, seed: int, m: MetricSet) -> None:
        self.seed_rows.append((seed, m))

    def summary(self) -> tuple[MetricSet, MetricSet]:
        """(mean, std) across seed rows."""
        if not self.seed_rows:
            raise ValueError("no seed rows recorded")
        stack = np.asarray(
            [[m.acc, m.b_acc, m.specificity, m.auc] for _, m in self.seed_rows]
        )
        mean = stack.mean(axis=0)
        std = stack.std(axis=0, ddof=0)
        return (
            MetricSet(*(float(x) for x in mean)),
            MetricSet(*(float(x) for x in std)),
        )

    def to_text(self) -> str:
        lines = [
            f"task={self.task} representation={self.representation}",
            f"{'seed':<8}{'acc':>9}{'b_acc':>9}{'sp*':>9}{'auc':>9}",
        ]
        for seed, m in self.seed_rows:
            lines.append(
                f"{seed:<8}{m.acc:>9.4f}{m.b_acc:>9.4f}{m.specificity:>9.4f}{m.auc:>9.4f}"
            )
        mean, std = self.summary()
        lines.append(
            f"{'mean':<8}{mean.acc:>9.4f}{mean.b_acc:>9.4f}"
            f"{mean.specificity:>9.4f}{mean.auc:>9.4f}"
        )
        lines.append(
            f"{'std':<8}{std.acc:>9.4f}{std.b_acc:>9.4f}"
            f"{std.specificity:>9.4f}{std.auc:>9.4f}"
        )
        return "\n".join(lines)

    def to_kv(self) -> list[tuple[str, str]]:
        pairs = [("task", self.task), ("representation", self.representation),
                 ("seeds", str(len(self.seed_rows)))]
        for seed, m in self.seed_rows:
            for name, value in m.as_dict().items():
                pairs.append((f"seed_{seed}.{name}", repr(value)))
        mean, std = self.summary()
        for name, value in mean.as_dict().items():
            pairs.append((f"mean.{name}", repr(value)))
        for name, value in std.as_dict().items():
            pairs.append((f"std.{name}", repr(value)))
        return pairs


def write_kv_report(pairs: list[tuple[str, str]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in pairs:
            f.write(f"{k} = {v}\n")
