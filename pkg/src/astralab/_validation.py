"""Input validation helpers shared by the estimator layer."""

from __future__ import annotations

import numpy as np

from .grid import SlideGrid
from .registry import ModelRegistry


def check_slides(X, require_records: bool = False) -> list[SlideGrid]:
    """Validate a cohort argument: a non-empty sequence of compatible SlideGrids."""
    slides = list(X)
    if not slides:
        raise ValueError("expected a non-empty sequence of SlideGrid")
    for item in slides:
        if not isinstance(item, SlideGrid):
            raise TypeError(f"expected SlideGrid elements, got {type(item).__name__}")
    registry = slides[0].registry
    for grid in slides[1:]:
        if grid.registry != registry:
            raise ValueError(
                f"slide {grid.slide_id} uses a different model registry than "
                f"{slides[0].slide_id}"
            )
    if require_records:
        for grid in slides:
            if grid.record is None:
                raise ValueError(f"slide {grid.slide_id} carries no annotation record")
    return slides


def check_registry_compatible(registry: ModelRegistry, other: ModelRegistry) -> None:
    if registry != other:
        raise ValueError("model registries do not match")


def check_unit_norm(vec: np.ndarray, tol: float = 1e-5, name: str = "vector") -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} must be unit-norm, got |v| = {norm:.6f}")
    return vec


def check_fitted(estimator, attr: str) -> None:
    if getattr(estimator, attr, None) is None:
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )
