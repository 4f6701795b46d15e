"""Structured prompt rendering and the pluggable frozen text encoder."""

from __future__ import annotations

import hashlib
import re
from typing import Callable, Protocol

import numpy as np
import torch

from .grid import Category, SlideRecord

TEXT_DIM = 512

# The four fixed templates keyed by classification category. Slot values
# are lowercased and inserted verbatim; rendering is total over valid
# records and never generates free text.
PROMPT_TEMPLATES: dict[Category, str] = {
    Category.MALIGNANT: (
        "A histopathology whole-slide image of malignant {cancer_type} from the {site}."
    ),
    Category.NORMAL_ADJACENT: (
        "A histopathology whole-slide image showing normal adjacent tissue from the {site}."
    ),
    Category.BENIGN: (
        "A histopathology whole-slide image of benign {cancer_type} from the {site}."
    ),
    Category.NORMAL: (
        "A histopathology whole-slide image of normal tissue from the {site}."
    ),
}


def build_prompt(record: SlideRecord) -> str:
    """Render the record through its category template."""
    template = PROMPT_TEMPLATES[record.classification_category]
    site = record.anatomic_site.lower()
    if "{cancer_type}" in template:
        if not record.cancer_type:
            raise ValueError(
                f"{record.classification_category.name} prompt needs a cancer_type"
            )
        return template.format(cancer_type=record.cancer_type.lower(), site=site)
    return template.format(site=site)


class TextEncoderHandle(Protocol):
    """Frozen text encoder contract: string -> 512-d unit vector, deterministic."""

    def encode(self, text: str) -> np.ndarray: ...


def _scaffold_tokens() -> frozenset[str]:
    """Tokens shared by every prompt template (the sentence scaffold)."""
    token_sets = []
    for template in PROMPT_TEMPLATES.values():
        stripped = template.replace("{cancer_type}", " ").replace("{site}", " ")
        token_sets.append(set(re.findall(r"[a-z0-9]+", stripped.lower())))
    common = set.intersection(*token_sets)
    return frozenset(common)


SCAFFOLD_TOKENS = _scaffold_tokens()
SCAFFOLD_WEIGHT = 0.15


class HashingTextEncoder:
    """Deterministic stand-in for a frozen clinical text encoder.

    Weighted bag-of-token hashing: every token hashes (with the seed) to a
    fixed pseudo-random direction in R^512 and the prompt embedding is the
    normalized weighted sum. Tokens belonging to the sentence scaffold
    shared by all templates are downweighted so the content slots dominate,
    the way a real sentence encoder keys on the informative words.
    """

    def __init__(self, seed: int = 0, dim: int = TEXT_DIM):
        self.seed = seed
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _token_direction(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}|{token}".encode("utf-8")).digest()
        token_seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(token_seed)
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def encode(self, text: str) -> np.ndarray:
        if text in self._cache:
            return self._cache[text]
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            tokens = ["<empty>"]
        acc = np.zeros(self.dim)
        for tok in tokens:
            weight = SCAFFOLD_WEIGHT if tok in SCAFFOLD_TOKENS else 1.0
            acc += weight * self._token_direction(tok)
        out = (acc / np.linalg.norm(acc)).astype(np.float64)
        self._cache[text] = out
        return out

    def encode_tensor(self, text: str, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.encode(text), dtype=dtype)


def mock_text_encode(text: str, seed: int = 0) -> np.ndarray:
    """One-shot convenience wrapper around HashingTextEncoder."""
    return HashingTextEncoder(seed=seed).encode(text)


_ENCODER_FACTORIES: dict[str, Callable[[int], TextEncoderHandle]] = {
    "hash": lambda seed: HashingTextEncoder(seed=seed),
}


def register_text_encoder(name: str, factory: Callable[[int], TextEncoderHandle]) -> None:
    """Plug in a drop-in encoder producing 512-d unit vectors."""
    _ENCODER_FACTORIES[name] = factory


def get_text_encoder(name: str, seed: int = 0) -> TextEncoderHandle:
    try:
        factory = _ENCODER_FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown text encoder {name!r}; registered: {sorted(_ENCODER_FACTORIES)}"
        ) from None
    return factory(seed)
