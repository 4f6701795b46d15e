"""Foundation-model registry: the embedding spaces unified on the shared grid."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ModelSpec:
    """One simulated tile-embedding space.

    Attributes:
        model_id: small integer index in [0, M).
        name: stable identifier used in archives and checkpoints.
        native_tile_px: edge length of the tiles this model embeds.
        embed_dim: dimensionality of its embedding vectors.
    """

    model_id: int
    name: str
    native_tile_px: int
    embed_dim: int

    def __post_init__(self):
        if self.model_id < 0:
            raise ValueError(f"model_id must be non-negative, got {self.model_id}")
        if self.embed_dim <= 0:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.native_tile_px <= 0:
            raise ValueError(f"native_tile_px must be positive, got {self.native_tile_px}")


class ModelRegistry:
    """Ordered collection of ModelSpecs plus the anchor designation.

    The anchor is the model whose native tile equals the grid stride; its
    tiles define cell validity on the shared lattice.
    """

    def __init__(self, specs: list[ModelSpec], anchor_name: str):
        if not specs:
            raise ValueError("registry needs at least one model")
        ids = [s.model_id for s in specs]
        if ids != list(range(len(specs))):
            raise ValueError(f"model_ids must be 0..M-1 in order, got {ids}")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate model names: {names}")
        if anchor_name not in names:
            raise ValueError(f"anchor {anchor_name!r} not among models {names}")
        self.specs = list(specs)
        self.anchor_name = anchor_name
        self._by_name = {s.name: s for s in specs}

    def __len__(self) -> int:
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    def __getitem__(self, model_id: int) -> ModelSpec:
        if not 0 <= model_id < len(self.specs):
            raise KeyError(f"unknown model_id {model_id}")
        return self.specs[model_id]

    def by_name(self, name: str) -> ModelSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown model name {name!r}") from None

    @property
    def anchor(self) -> ModelSpec:
        return self._by_name[self.anchor_name]

    @property
    def embed_dims(self) -> list[int]:
        return [s.embed_dim for s in self.specs]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ModelRegistry)
            and self.specs == other.specs
            and self.anchor_name == other.anchor_name
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{s.name}:{s.embed_dim}d@{s.native_tile_px}px" for s in self.specs)
        return f"ModelRegistry({inner}, anchor={self.anchor_name})"


def reference_registry() -> ModelRegistry:
    """The default four-space registry at full embedding widths."""
    return ModelRegistry(
        [
            ModelSpec(0, "fm_a", 256, 1536),
            ModelSpec(1, "fm_b", 256, 1536),
            ModelSpec(2, "fm_c", 512, 768),
            ModelSpec(3, "fm_d", 224, 2560),
        ],
        anchor_name="fm_c",
    )


def desk_registry() -> ModelRegistry:
    """Narrow four-space registry for CPU-scale experiments.

    Same native tile layout as the reference registry so the grid geometry
    is identical; only the embedding widths shrink.
    """
    return ModelRegistry(
        [
            ModelSpec(0, "fm_a", 256, 96),
            ModelSpec(1, "fm_b", 256, 96),
            ModelSpec(2, "fm_c", 512, 48),
            ModelSpec(3, "fm_d", 224, 160),
        ],
        anchor_name="fm_c",
    )


def make_registry(kind: str) -> ModelRegistry:
    if kind == "reference":
        return reference_registry()
    if kind == "desk":
        return desk_registry()
    raise ValueError(f"unknown registry kind {kind!r} (expected 'reference' or 'desk')")
