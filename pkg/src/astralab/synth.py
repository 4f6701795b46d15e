"""Synthetic slide generator with planted region geometry and consistent embeddings.

Every region archetype owns a latent code shared across the cohort; each
embedding space sees that code through its own fixed linear map plus
Gaussian noise, so cross-space reconstruction is learnable by construction
and prompt classes stay semantically separable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Category, RegionLabel, SlideGrid, SlideRecord
from .registry import ModelRegistry, desk_registry

# Default archetype palette (ids into the latent code table).
TUMOR_SOLID = 0
TUMOR_GLANDULAR = 1
BENIGN_EPITHELIUM = 2
STROMA = 3
IMMUNE = 4
NECROSIS = 5

DEFAULT_ARCHETYPE_LABELS: dict[int, RegionLabel] = {
    TUMOR_SOLID: RegionLabel.TUMOR,
    TUMOR_GLANDULAR: RegionLabel.TUMOR,
    BENIGN_EPITHELIUM: RegionLabel.BENIGN_EPITHELIUM,
    STROMA: RegionLabel.STROMA,
    IMMUNE: RegionLabel.STROMA,
    NECROSIS: RegionLabel.TUMOR,
    # Extended table for the eight-class cohort: two more tumor phenotypes
    # and two site-specific parenchyma grounds.
    6: RegionLabel.TUMOR,
    7: RegionLabel.TUMOR,
    8: RegionLabel.STROMA,
    9: RegionLabel.STROMA,
}


@dataclass(frozen=True)
class ClassProfile:
    """Content recipe for one prompt class.

    blob_archetype paints the class's focal lesion (tumor or benign
    epithelium); a tuple means one archetype is chosen per slide.
    ground_archetype fills the remaining tissue, optionally patched with
    accent_archetype regions so the background has learnable spatial
    structure too.
    """

    category: Category
    anatomic_site: str
    cancer_type: str | None = None
    blob_archetype: int | tuple[int, ...] | None = None
    ground_archetype: int = STROMA
    accent_archetype: int | None = None
    blob_fraction: float = 0.45

    def record(self) -> SlideRecord:
        return SlideRecord(
            classification_category=self.category,
            anatomic_site=self.anatomic_site,
            cancer_type=self.cancer_type,
        )

    def blob_archetypes(self) -> tuple[int, ...]:
        if self.blob_archetype is None:
            return ()
        if isinstance(self.blob_archetype, int):
            return (self.blob_archetype,)
        return tuple(self.blob_archetype)


def category4_profiles() -> list[ClassProfile]:
    """Four profiles, one per classification category.

    Normal-adjacent slides carry a small tumor blob (peritumoral tissue is
    what the category means), so tumor-context stroma is not exclusive to
    malignant slides.
    """
    return [
        ClassProfile(Category.MALIGNANT, "lung", "lung adenocarcinoma",
                     blob_archetype=TUMOR_GLANDULAR, ground_archetype=STROMA,
                     accent_archetype=IMMUNE),
        ClassProfile(Category.NORMAL_ADJACENT, "lung",
                     blob_archetype=(TUMOR_SOLID, TUMOR_GLANDULAR),
                     blob_fraction=0.10,
                     ground_archetype=STROMA, accent_archetype=IMMUNE),
        ClassProfile(Category.BENIGN, "breast", "fibroadenoma",
                     blob_archetype=BENIGN_EPITHELIUM, ground_archetype=STROMA),
        ClassProfile(Category.NORMAL, "kidney",
                     blob_archetype=None, ground_archetype=STROMA,
                     accent_archetype=BENIGN_EPITHELIUM),
    ]


def prompts8_profiles() -> list[ClassProfile]:
    """Eight prompt classes spanning all four categories.

    Uses an extended archetype table (ids 0..9) so each class carries a
    distinct content signature; requires archetypes >= 10.
    """
    return [
        ClassProfile(Category.MALIGNANT, "lung", "lung adenocarcinoma",
                     blob_archetype=TUMOR_GLANDULAR, ground_archetype=STROMA,
                     accent_archetype=IMMUNE),
        ClassProfile(Category.MALIGNANT, "lung", "lung squamous cell carcinoma",
                     blob_archetype=TUMOR_SOLID, ground_archetype=STROMA,
                     accent_archetype=IMMUNE),
        ClassProfile(Category.MALIGNANT, "kidney", "renal cell carcinoma",
                     blob_archetype=6, ground_archetype=STROMA),
        ClassProfile(Category.MALIGNANT, "breast", "breast carcinoma",
                     blob_archetype=7, ground_archetype=STROMA,
                     accent_archetype=IMMUNE),
        ClassProfile(Category.BENIGN, "breast", "fibroadenoma",
                     blob_archetype=BENIGN_EPITHELIUM, ground_archetype=STROMA),
        ClassProfile(Category.NORMAL_ADJACENT, "colon",
                     blob_archetype=(TUMOR_SOLID, TUMOR_GLANDULAR, 6, 7),
                     blob_fraction=0.10,
                     ground_archetype=STROMA, accent_archetype=IMMUNE),
        ClassProfile(Category.NORMAL, "kidney",
                     blob_archetype=None, ground_archetype=8),
        ClassProfile(Category.NORMAL, "breast",
                     blob_archetype=None, ground_archetype=9),
    ]


PROFILE_SETS = {
    "categories4": category4_profiles,
    "prompts8": prompts8_profiles,
}


@dataclass
class SynthConfig:
    """Knobs for the synthetic cohort generator.

    The archetype latent codes and the per-model linear maps are drawn
    once per (universe_seed, registry, archetypes, archetype_dim) and
    shared by every slide generated under this config.
    """

    registry: ModelRegistry = field(default_factory=desk_registry)
    lattice: int = 48
    archetypes: int = 6
    archetype_dim: int = 24
    sigma: float = 0.05
    blob_radius: tuple[float, float] = (3.0, 7.0)
    accent_fraction: float = 0.18
    tissue_fraction: float = 0.62
    model_dropout: float = 0.0
    profiles: list[ClassProfile] = field(default_factory=category4_profiles)
    archetype_labels: dict[int, RegionLabel] = field(
        default_factory=lambda: dict(DEFAULT_ARCHETYPE_LABELS)
    )
    universe_seed: int = 7

    def __post_init__(self):
        if self.lattice < 16:
            raise ValueError(
                f"lattice {self.lattice} cannot host a 16x16 crop window"
            )
        if self.archetypes < 1:
            raise ValueError("need at least one archetype")
        for p in self.profiles:
            used = [p.ground_archetype, *p.blob_archetypes()]
            if p.accent_archetype is not None:
                used.append(p.accent_archetype)
            for a in used:
                if not 0 <= a < self.archetypes:
                    raise ValueError(
                        f"profile references archetype {a} outside [0, {self.archetypes})"
                    )
        if not 0.0 <= self.model_dropout < 1.0:
            raise ValueError("model_dropout must be in [0, 1)")

    def label_of(self, archetype: int) -> RegionLabel:
        return self.archetype_labels.get(archetype, RegionLabel.STROMA)


class ArchetypeUniverse:
    """Latent codes and per-model maps underlying one cohort."""

    def __init__(self, config: SynthConfig):
        rng = np.random.default_rng(config.universe_seed)
        d = config.archetype_dim
        self.codes = rng.standard_normal((config.archetypes, d))
        self.maps = {}
        for spec in config.registry:
            # Per-coordinate unit variance so sigma is a relative noise level.
            self.maps[spec.model_id] = rng.standard_normal(
                (spec.embed_dim, d)
            ) / np.sqrt(d)

    def clean_embedding(self, model_id: int, archetype: int) -> np.ndarray:
        return self.maps[model_id] @ self.codes[archetype]


_UNIVERSE_CACHE: dict[tuple, ArchetypeUniverse] = {}


def universe_for(config: SynthConfig) -> ArchetypeUniverse:
    key = (
        config.universe_seed,
        config.archetypes,
        config.archetype_dim,
        tuple((s.name, s.embed_dim) for s in config.registry),
    )
    if key not in _UNIVERSE_CACHE:
        _UNIVERSE_CACHE[key] = ArchetypeUniverse(config)
    return _UNIVERSE_CACHE[key]


def _ellipse_mask(shape: tuple[int, int], center, radii, angle) -> np.ndarray:
    h, w = shape
    rows, cols = np.mgrid[0:h, 0:w]
    dy = rows - center[1]
    dx = cols - center[0]
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0


def _tissue_foreground(lattice: int, target: float, rng: np.random.Generator) -> np.ndarray:
    """Irregular elliptical tissue region covering about `target` of the lattice."""
    c = lattice / 2.0
    center = (c + rng.uniform(-0.05, 0.05) * lattice, c + rng.uniform(-0.05, 0.05) * lattice)
    # Solve r so an ellipse with ~15% axis wobble hits the target fraction.
    base = lattice * np.sqrt(target / np.pi)
    radii = (base * rng.uniform(0.9, 1.15), base * rng.uniform(0.9, 1.15))
    mask = _ellipse_mask((lattice, lattice), center, radii, rng.uniform(0, np.pi))
    # A couple of side lobes keep the outline from being a clean ellipse.
    for _ in range(2):
        lobe_c = (
            center[0] + rng.uniform(-0.3, 0.3) * lattice,
            center[1] + rng.uniform(-0.3, 0.3) * lattice,
        )
        lobe_r = (base * rng.uniform(0.25, 0.45), base * rng.uniform(0.25, 0.45))
        mask |= _ellipse_mask((lattice, lattice), lobe_c, lobe_r, rng.uniform(0, np.pi))
    return mask


def _paint_blobs(
    allowed: np.ndarray,
    target_fraction: float,
    radius_range: tuple[float, float],
    rng: np.random.Generator,
    max_blobs: int = 64,
) -> np.ndarray:
    """Union of random ellipses over `allowed` until coverage reaches the target."""
    painted = np.zeros_like(allowed)
    n_allowed = int(allowed.sum())
    if n_allowed == 0 or target_fraction <= 0:
        return painted
    cand_rows, cand_cols = np.nonzero(allowed)
    for _ in range(max_blobs):
        if painted.sum() / n_allowed >= target_fraction:
            break
        i = rng.integers(len(cand_rows))
        center = (cand_cols[i], cand_rows[i])
        radii = (
            rng.uniform(*radius_range),
            rng.uniform(*radius_range),
        )
        blob = _ellipse_mask(allowed.shape, center, radii, rng.uniform(0, np.pi))
        painted |= blob & allowed
    return painted


def generate_synthetic_slide(
    config: SynthConfig,
    seed: int,
    profile_index: int | None = None,
    slide_id: str | None = None,
) -> SlideGrid:
    """Generate one slide: geometry, planted labels, and embeddings, all from seed."""
    rng = np.random.default_rng(seed)
    profiles = config.profiles
    if profile_index is None:
        profile_index = int(rng.integers(len(profiles)))
    profile = profiles[profile_index % len(profiles)]
    universe = universe_for(config)
    L = config.lattice

    tissue = _tissue_foreground(L, config.tissue_fraction, rng)
    archetype = np.full((L, L), profile.ground_archetype, dtype=np.int16)

    if profile.accent_archetype is not None:
        accents = _paint_blobs(tissue, config.accent_fraction, config.blob_radius, rng)
        archetype[accents] = profile.accent_archetype
    lesion_choices = profile.blob_archetypes()
    if lesion_choices:
        lesion = lesion_choices[int(rng.integers(len(lesion_choices)))]
        blobs = _paint_blobs(tissue, profile.blob_fraction, config.blob_radius, rng)
        archetype[blobs] = lesion

    labels = np.full((L, L), RegionLabel.BACKGROUND, dtype=np.int8)
    trows, tcols = np.nonzero(tissue)
    for a in np.unique(archetype[tissue]):
        sel = tissue & (archetype == a)
        labels[sel] = config.label_of(int(a))

    per_model_cells = {}
    per_model_emb = {}
    anchor_id = config.registry.anchor.model_id
    cell_arch = archetype[trows, tcols]
    for spec in config.registry:
        keep = np.ones(len(trows), dtype=bool)
        if spec.model_id != anchor_id and config.model_dropout > 0:
            keep = rng.random(len(trows)) >= config.model_dropout
        cols_k = tcols[keep]
        rows_k = trows[keep]
        arch_k = cell_arch[keep]
        clean = universe.codes[arch_k] @ universe.maps[spec.model_id].T
        noise = rng.standard_normal(clean.shape) * config.sigma
        per_model_cells[spec.model_id] = np.stack([cols_k, rows_k], axis=1).astype(np.int32)
        per_model_emb[spec.model_id] = (clean + noise).astype(np.float32)

    if slide_id is None:
        slide_id = f"synth-{seed:010d}"
    return SlideGrid(
        slide_id=slide_id,
        width_cells=L,
        height_cells=L,
        registry=config.registry,
        per_model_cells=per_model_cells,
        per_model_embeddings=per_model_emb,
        record=profile.record(),
        planted_labels=labels,
    )


def generate_cohort(config: SynthConfig, seed: int, n_slides: int) -> list[SlideGrid]:
    """Deterministic cohort; slide i takes profile i mod len(profiles)."""
    seq = np.random.SeedSequence(seed)
    child_seeds = seq.generate_state(n_slides, dtype=np.uint32)
    slides = []
    for i in range(n_slides):
        slides.append(
            generate_synthetic_slide(
                config,
                seed=int(child_seeds[i]),
                profile_index=i % len(config.profiles),
                slide_id=f"synth-{seed:06d}-{i:04d}",
            )
        )
    return slides
