"""Estimator-style front door: fit/transform/predict over SlideGrid cohorts.

Thin wrappers over the stage functions so the pipeline composes with
scikit-learn tooling (get_params/set_params, clone); X everywhere is a
sequence of SlideGrid.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from ._validation import check_fitted, check_slides
from .config import RunConfig
from .evaluation import LocalizationResult, localize
from .text import build_prompt, get_text_encoder
from .trainer import (
    align,
    pretrain,
    slide_embeddings,
    task_labels,
    train_classifier,
)


class SpatialContextualizer(BaseEstimator, TransformerMixin):
    """Masked-reconstruction pretraining of the MoE contextualizer.

    fit(X) runs the pretraining stage on a cohort; transform(X) returns the
    per-slide contextualized tile states as (cells, states) pairs.
    """

    def __init__(
        self,
        latent_dim: int = 128,
        num_layers: int = 6,
        num_heads: int = 4,
        num_experts: int = 4,
        top_k: int = 2,
        expert_hidden: int = 256,
        tap_layers: str = "2,4,6",
        decoder_dim: int = 64,
        decoder_heads: int = 4,
        lr: float = 2e-4,
        weight_decay: float = 0.05,
        warmup_steps: int = 2000,
        epochs: int = 10,
        max_steps: int = 0,
        batch_size: int = 16,
        crops_per_slide: int = 20,
        load_balance_coeff: float = 0.01,
        grad_clip: float = 1.0,
        precision: str = "float32",
        input_model: str = "anchor",
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.num_experts = num_experts
        self.top_k = top_k
        self.expert_hidden = expert_hidden
        self.tap_layers = tap_layers
        self.decoder_dim = decoder_dim
        self.decoder_heads = decoder_heads
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.crops_per_slide = crops_per_slide
        self.load_balance_coeff = load_balance_coeff
        self.grad_clip = grad_clip
        self.precision = precision
        self.input_model = input_model
        self.seed = seed

    def _run_config(self, registry_kind: str) -> RunConfig:
        cfg = RunConfig()
        cfg.data.registry = registry_kind
        cfg.encoder_kv.update(
            latent_dim=self.latent_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            num_experts=self.num_experts,
            top_k=self.top_k,
            expert_hidden=self.expert_hidden,
            tap_layers=self.tap_layers,
        )
        cfg.decoder_kv.update(decoder_dim=self.decoder_dim, num_heads=self.decoder_heads)
        p = cfg.pretrain
        p.lr = self.lr
        p.weight_decay = self.weight_decay
        p.warmup_steps = self.warmup_steps
        p.epochs = self.epochs
        p.max_steps = self.max_steps
        p.batch_size = self.batch_size
        p.crops_per_slide = self.crops_per_slide
        p.load_balance_coeff = self.load_balance_coeff
        p.grad_clip = self.grad_clip
        p.precision = self.precision
        cfg.align.input_model = self.input_model
        cfg.localize.input_model = self.input_model
        return cfg

    def fit(self, X, y=None):
        slides = check_slides(X)
        kind = "desk" if slides[0].registry.embed_dims[0] < 1536 else "reference"
        self.config_ = self._run_config(kind)
        out = pretrain(slides, self.config_, self.seed)
        self.model_ = out.model
        self.trace_ = out.trace
        self.checkpoint_ = out.checkpoint
        return self

    def transform(self, X):
        check_fitted(self, "model_")
        slides = check_slides(X)
        input_model = self.config_.input_model_id(self.input_model)
        out = []
        for grid in slides:
            ctx = self.model_.contextualize(grid, input_model=input_model)
            out.append((ctx.cells, ctx.states.cpu().numpy()))
        return out


class PromptAligner(BaseEstimator, TransformerMixin):
    """Contrastive slide-prompt alignment on top of a fitted contextualizer.

    transform(X) returns the (N, 512) unit-norm slide embeddings.
    """

    def __init__(
        self,
        contextualizer: SpatialContextualizer | None = None,
        lr: float = 1e-4,
        weight_decay: float = 0.05,
        epochs: int = 50,
        batch_size: int = 32,
        temperature: float = 0.1,
        attn_hidden: int = 256,
        attn_dropout: float = 0.25,
        freeze_encoder: bool = True,
        text_encoder: str = "hash",
        text_seed: int = 0,
        seed: int = 0,
    ):
        self.contextualizer = contextualizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.temperature = temperature
        self.attn_hidden = attn_hidden
        self.attn_dropout = attn_dropout
        self.freeze_encoder = freeze_encoder
        self.text_encoder = text_encoder
        self.text_seed = text_seed
        self.seed = seed

    def fit(self, X, y=None):
        if self.contextualizer is None:
            raise ValueError("PromptAligner needs a fitted contextualizer")
        check_fitted(self.contextualizer, "model_")
        slides = check_slides(X, require_records=True)
        config = self.contextualizer.config_
        a = config.align
        a.lr = self.lr
        a.weight_decay = self.weight_decay
        a.epochs = self.epochs
        a.batch_size = self.batch_size
        a.temperature = self.temperature
        a.attn_hidden = self.attn_hidden
        a.attn_dropout = self.attn_dropout
        a.freeze_encoder = self.freeze_encoder
        a.text_encoder = self.text_encoder
        a.text_seed = self.text_seed
        out = align(slides, self.contextualizer.model_, config, self.seed)
        self.model_ = out.model
        self.config_ = config
        self.trace_ = out.trace
        self.checkpoint_ = out.checkpoint
        return self

    def transform(self, X):
        check_fitted(self, "model_")
        slides = check_slides(X)
        input_model = self.config_.input_model_id(self.config_.align.input_model)
        return slide_embeddings(self.model_, slides, input_model=input_model).cpu().numpy()

    def prompt_vector(self, record) -> np.ndarray:
        encoder = get_text_encoder(self.text_encoder, seed=self.text_seed)
        return encoder.encode(build_prompt(record))


class SlideLevelClassifier(BaseEstimator, ClassifierMixin):
    """Linear classification over aligned slide embeddings (or raw bags)."""

    def __init__(
        self,
        aligner: PromptAligner | None = None,
        representation: str = "astra",
        task: str = "category4",
        lr: float = 1e-4,
        weight_decay: float = 1e-5,
        epochs: int = 30,
        patience: int = 7,
        seeds: int = 5,
        val_fraction: float = 0.1,
        test_fraction: float = 0.2,
        split_seed: int = 42,
    ):
        self.aligner = aligner
        self.representation = representation
        self.task = task
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.patience = patience
        self.seeds = seeds
        self.val_fraction = val_fraction
        self.test_fraction = test_fraction
        self.split_seed = split_seed

    def fit(self, X, y=None):
        """Run the K-seed protocol; the per-seed report lands in report_."""
        if self.aligner is None:
            raise ValueError("SlideLevelClassifier needs a fitted aligner")
        check_fitted(self.aligner, "model_")
        slides = check_slides(X, require_records=True)
        config = self.aligner.config_
        d = config.downstream
        d.representation = self.representation
        d.task = self.task
        d.lr = self.lr
        d.weight_decay = self.weight_decay
        d.epochs = self.epochs
        d.patience = self.patience
        d.seeds = self.seeds
        d.val_fraction = self.val_fraction
        d.test_fraction = self.test_fraction
        d.split_seed = self.split_seed
        self.report_ = train_classifier(slides, self.aligner.model_, config)
        _, self.classes_ = task_labels(slides, self.task)
        self._fit_head(slides, config)
        return self

    def _fit_head(self, slides, config):
        """One final head on the full cohort for predict()."""
        import torch.nn.functional as F

        labels, _ = task_labels(slides, self.task)
        feats = torch.as_tensor(self.aligner.transform(slides))
        torch.manual_seed(self.split_seed)
        head = torch.nn.Linear(feats.shape[1], len(self.classes_)).to(feats.dtype)
        opt = torch.optim.Adam(head.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        target = torch.as_tensor(labels)
        for _ in range(self.epochs):
            loss = F.cross_entropy(head(feats), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.head_ = head

    def predict_proba(self, X):
        check_fitted(self, "head_")
        slides = check_slides(X)
        feats = torch.as_tensor(self.aligner.transform(slides))
        with torch.no_grad():
            return torch.softmax(self.head_(feats), dim=1).cpu().numpy()

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


class TextGuidedLocalizer(BaseEstimator):
    """Prompt-similarity tumor masks from a fitted aligner."""

    def __init__(
        self,
        aligner: PromptAligner | None = None,
        threshold: float = 0.15,
        exclusion_floor: float = 0.20,
    ):
        self.aligner = aligner
        self.threshold = threshold
        self.exclusion_floor = exclusion_floor

    def fit(self, X=None, y=None):
        if self.aligner is None:
            raise ValueError("TextGuidedLocalizer needs a fitted aligner")
        check_fitted(self.aligner, "model_")
        return self

    def predict(self, X) -> list[LocalizationResult]:
        self.fit()
        slides = check_slides(X, require_records=True)
        config = self.aligner.config_
        input_model = config.input_model_id(config.localize.input_model)
        results = []
        for grid in slides:
            prompt_vec = self.aligner.prompt_vector(grid.record)
            results.append(
                localize(
                    grid,
                    self.aligner.model_,
                    prompt_vec,
                    threshold=self.threshold,
                    input_model=input_model,
                    exclusion_floor=self.exclusion_floor,
                )
            )
        return results
