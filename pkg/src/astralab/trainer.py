"""Stage orchestration: masked pretraining, prompt alignment, classification.

Single-process and deterministic given (config, seed): model init comes
from the torch seed, crop sampling from per-(slide, epoch) numpy streams,
and every loss-trace record is an append-only JSON line.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import balanced_accuracy_score

from .alignment import AlignmentBatch, GatedAttentionPool, symmetric_contrastive_loss
from .checkpoint import Checkpoint
from .config import RunConfig
from .decoder import total_pretrain_loss
from .evaluation import EvalReport, MetricSet, metrics
from .grid import SlideGrid
from .model import AstraModel, build_model
from .sampling import make_crop_batch, rng_stream
from .schedule import EarlyStopper, warmup_cosine_lr
from .text import build_prompt, get_text_encoder

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _check_cohort(slides: list[SlideGrid], registry) -> None:
    if not slides:
        raise ValueError("empty cohort")
    for grid in slides:
        if grid.registry != registry:
            raise ValueError(
                f"slide {grid.slide_id} was built under a different model registry"
            )


class TraceWriter:
    """Append-only newline-delimited JSON records."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        else:
            self._fh = None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class PretrainOutput:
    model: AstraModel
    checkpoint: Checkpoint
    trace: list[dict]


def pretrain(
    slides: list[SlideGrid],
    config: RunConfig,
    seed: int,
    trace_path: str | Path | None = None,
) -> PretrainOutput:
    """Run the masked multi-target reconstruction stage."""
    recipe = config.pretrain
    recipe.validate()
    registry = slides[0].registry
    _check_cohort(slides, registry)
    dtype = DTYPES[recipe.precision]

    model = build_model(
        registry, config.encoder_config(), config.decoder_config(), seed=seed, dtype=dtype
    )

    steps_per_epoch = max(
        1, math.ceil(len(slides) * recipe.crops_per_slide / recipe.batch_size)
    )
    total_steps = recipe.max_steps or recipe.epochs * steps_per_epoch
    if recipe.warmup_steps > total_steps:
        raise ValueError(
            f"warmup_steps {recipe.warmup_steps} exceeds total steps {total_steps}"
        )

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        params,
        lr=recipe.lr,
        betas=(recipe.beta1, recipe.beta2),
        weight_decay=recipe.weight_decay,
    )
    trace = TraceWriter(trace_path)

    step = 0
    epoch = 0
    done = False
    while not done:
        batches = _epoch_batches(slides, recipe, seed, epoch)
        for batch in batches:
            step += 1
            lr = warmup_cosine_lr(step, recipe.lr, recipe.warmup_steps, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            out = model.forward_crops(batch)
            loss = total_pretrain_loss(out.recon, out.moe_aux, recipe.load_balance_coeff)
            if not torch.isfinite(loss):
                trace.close()
                raise RuntimeError(f"non-finite pretraining loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, recipe.grad_clip)
            optimizer.step()
            trace.write(
                {
                    "step": step,
                    "recon": float(out.recon.detach()),
                    "moe": float(out.moe_aux.detach()),
                    "lr": lr,
                }
            )
            if step >= total_steps:
                done = True
                break
        epoch += 1
    trace.close()

    ckpt = make_checkpoint(model, config, stage="pretrain", step=step)
    return PretrainOutput(model=model, checkpoint=ckpt, trace=trace.records)


def _epoch_batches(slides, recipe, seed: int, epoch: int):
    """Sample each slide crops_per_slide times, shuffle, and batch."""
    crops = []
    for grid in slides:
        stream = rng_stream(seed, grid.slide_id, epoch)
        for _ in range(recipe.crops_per_slide):
            crops.append(make_crop_batch(grid, stream, max_tries=recipe.max_tries))
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0EB0C, epoch]))
    order = order_rng.permutation(len(crops))
    batches = []
    for start in range(0, len(crops), recipe.batch_size):
        batch = [crops[i] for i in order[start : start + recipe.batch_size]]
        batches.append(batch)
    return batches


def make_checkpoint(model: AstraModel, config: RunConfig, stage: str, step: int) -> Checkpoint:
    arrays = {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in model.named_arrays().items()
    }
    return Checkpoint(
        config_text=config.to_text(),
        stage=stage,
        step=step,
        arrays=arrays,
        rng_state=torch.get_rng_state().numpy().tobytes(),
    )


def model_from_checkpoint(ckpt: Checkpoint, config: RunConfig | None = None) -> AstraModel:
    """Rebuild the model skeleton from the snapshot and load its arrays."""
    from .config import parse_config

    cfg = config if config is not None else parse_config(ckpt.config_text)
    dtype = DTYPES[cfg.pretrain.precision]
    model = build_model(
        cfg.registry(), cfg.encoder_config(), cfg.decoder_config(), seed=0, dtype=dtype
    )
    if any(name.startswith("abmil.") for name in ckpt.arrays):
        model.attach_alignment_head(
            attn_hidden=cfg.align.attn_hidden, dropout=cfg.align.attn_dropout
        )
    if any(name.startswith("cls_head.") for name in ckpt.arrays):
        n_classes = ckpt.arrays["cls_head.w"].shape[0]
        model.attach_classifier(n_classes)
    model.to(dtype)
    model.load_named_arrays(ckpt.arrays)
    return model


def masked_cosine_eval(
    model: AstraModel, slides: list[SlideGrid], seed: int, n_crops: int = 64
) -> dict[int, float]:
    """Mean masked-position cosine per target space on held-out seeded crops."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC05]))
    crops = []
    for i in range(n_crops):
        grid = slides[int(rng.integers(len(slides)))]
        crops.append(make_crop_batch(grid, rng))
    with torch.no_grad():
        sums = {spec.model_id: 0.0 for spec in model.registry}
        counts = {spec.model_id: 0 for spec in model.registry}
        for start in range(0, len(crops), 16):
            out = model.forward_crops(crops[start : start + 16])
            for k, cos in out.cosine_by_model.items():
                if not math.isnan(cos):
                    sums[k] += cos
                    counts[k] += 1
    return {k: sums[k] / counts[k] if counts[k] else float("nan") for k in sums}


# -- alignment stage -----------------------------------------------------


@dataclass
class AlignOutput:
    model: AstraModel
    checkpoint: Checkpoint
    trace: list[dict]


def align(
    slides: list[SlideGrid],
    model: AstraModel,
    config: RunConfig,
    seed: int,
    trace_path: str | Path | None = None,
) -> AlignOutput:
    """Contrastive slide-prompt alignment over the frozen (by default) encoder."""
    recipe = config.align
    recipe.validate()
    registry = model.registry
    _check_cohort(slides, registry)
    for grid in slides:
        if grid.record is None:
            raise ValueError(f"slide {grid.slide_id} has no annotation record")

    dtype = DTYPES[recipe.precision]
    model.to(dtype)
    input_model = config.input_model_id(recipe.input_model)

    torch.manual_seed(seed + 1)
    head = model.attach_alignment_head(
        attn_hidden=recipe.attn_hidden, dropout=recipe.attn_dropout
    )

    encoder_params = (
        list(model.projectors.parameters())
        + list(model.encoder.parameters())
        + list(model.decoder.parameters())
    )
    trained = list(head.parameters())
    if recipe.freeze_encoder:
        cached = [
            model.contextualize(grid, input_model=input_model).states for grid in slides
        ]
    else:
        cached = None
        trained += encoder_params

    encoder_fn = get_text_encoder(recipe.text_encoder, seed=recipe.text_seed)
    texts = torch.stack(
        [
            torch.as_tensor(encoder_fn.encode(build_prompt(grid.record)), dtype=dtype)
            for grid in slides
        ]
    )

    optimizer = torch.optim.AdamW(trained, lr=recipe.lr, weight_decay=recipe.weight_decay)
    steps_per_epoch = len(slides) // recipe.batch_size
    total_steps = max(1, steps_per_epoch * recipe.epochs)
    trace = TraceWriter(trace_path)

    step = 0
    order_master = np.random.default_rng(np.random.SeedSequence([seed, 0xA119]))
    model.train()
    for epoch in range(recipe.epochs):
        if steps_per_epoch == 0:
            warnings.warn(
                f"alignment epoch {epoch} skipped: {len(slides)} slides make no "
                f"complete batch of {recipe.batch_size}",
                stacklevel=2,
            )
            break
        order = order_master.permutation(len(slides))
        for b in range(steps_per_epoch):
            idx = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
            lr = recipe.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for group in optimizer.param_groups:
                group["lr"] = lr
            slide_vecs = []
            for i in idx:
                if cached is not None:
                    tiles = cached[i]
                else:
                    tiles = model.contextualize_with_grad(
                        slides[i], input_model=input_model
                    ).states
                vec, _attn = head(tiles)
                slide_vecs.append(vec)
            batch = AlignmentBatch(
                slide_embeddings=torch.stack(slide_vecs),
                text_embeddings=texts[idx],
                temperature=recipe.temperature,
            )
            loss = symmetric_contrastive_loss(batch)
            if not torch.isfinite(loss):
                trace.close()
                raise RuntimeError(f"non-finite alignment loss at step {step + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            trace.write({"epoch": epoch, "step": step, "align_loss": float(loss.detach()), "lr": lr})
    model.eval()
    trace.close()

    ckpt = make_checkpoint(model, config, stage="align", step=step)
    return AlignOutput(model=model, checkpoint=ckpt, trace=trace.records)


def slide_embeddings(
    model: AstraModel, slides: list[SlideGrid], input_model: int | None = None
) -> torch.Tensor:
    """Eval-mode aligned slide embeddings, (N, 512) unit rows."""
    if model.abmil is None:
        raise ValueError("model has no alignment head")
    model.eval()
    out = []
    with torch.no_grad():
        for grid in slides:
            tiles = model.contextualize(grid, input_model=input_model).states
            vec, _ = model.abmil(tiles)
            out.append(vec)
    return torch.stack(out)


def prompt_retrieval_accuracy(
    model: AstraModel, slides: list[SlideGrid], config: RunConfig
) -> float:
    """Top-1 slide-to-own-prompt retrieval over the distinct class prompts."""
    recipe = config.align
    encoder_fn = get_text_encoder(recipe.text_encoder, seed=recipe.text_seed)
    prompts = [build_prompt(grid.record) for grid in slides]
    classes = sorted(set(prompts))
    class_vecs = torch.stack(
        [torch.as_tensor(encoder_fn.encode(p), dtype=model.dtype) for p in classes]
    )
    embs = slide_embeddings(
        model, slides, input_model=config.input_model_id(recipe.input_model)
    )
    sims = embs @ class_vecs.T
    top = sims.argmax(dim=1)
    hits = sum(int(classes[top[i]] == prompts[i]) for i in range(len(slides)))
    return hits / len(slides)


# -- downstream classification -------------------------------------------


def task_labels(slides: list[SlideGrid], task: str) -> tuple[np.ndarray, list[str]]:
    """Integer labels plus class names for a cohort."""
    if task == "category4":
        names = ["MALIGNANT", "NORMAL_ADJACENT", "BENIGN", "NORMAL"]
        labels = np.asarray(
            [int(grid.record.classification_category) for grid in slides], dtype=np.int64
        )
        return labels, names
    if task == "prompt_class":
        prompts = [build_prompt(grid.record) for grid in slides]
        names = sorted(set(prompts))
        index = {p: i for i, p in enumerate(names)}
        return np.asarray([index[p] for p in prompts], dtype=np.int64), names
    raise ValueError(f"unknown task {task!r}")


def stratified_split(
    labels: np.ndarray, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """(rest, held_out) index split keeping per-class proportions."""
    rng = np.random.default_rng(seed)
    held = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_held = max(1, round(fraction * len(idx))) if len(idx) > 1 else 0
        held.extend(idx[:n_held].tolist())
    held = np.asarray(sorted(held), dtype=np.int64)
    rest = np.asarray(sorted(set(range(len(labels))) - set(held.tolist())), dtype=np.int64)
    return rest, held


class RawBagClassifier(nn.Module):
    """Gated-attention pool over raw tile embeddings plus a linear head."""

    def __init__(self, in_dim: int, n_classes: int, attn_hidden: int = 256, dropout: float = 0.25):
        super().__init__()
        self.v = nn.Linear(in_dim, attn_hidden)
        self.u = nn.Linear(in_dim, attn_hidden)
        self.score = nn.Linear(attn_hidden, 1)
        self.drop = nn.Dropout(dropout)
        self.head = nn.Linear(in_dim, n_classes)

    def forward(self, bag: torch.Tensor) -> torch.Tensor:
        gate = torch.tanh(self.v(bag)) * torch.sigmoid(self.u(bag))
        attn = torch.softmax(self.score(self.drop(gate)).squeeze(-1), dim=0)
        return self.head(attn @ bag)


def train_classifier(
    slides: list[SlideGrid],
    model: AstraModel,
    config: RunConfig,
    seeds: list[int] | None = None,
) -> EvalReport:
    """K seeded runs of the downstream protocol; returns the seed-row report."""
    recipe = config.downstream
    recipe.validate()
    labels, class_names = task_labels(slides, recipe.task)
    n_classes = len(class_names)

    if recipe.representation == "astra":
        feats = slide_embeddings(
            model, slides, input_model=config.input_model_id(config.align.input_model)
        )
        bags = None
    else:
        input_model = config.input_model_id(config.align.input_model)
        bags = [
            torch.as_tensor(grid.embeddings(input_model), dtype=model.dtype)
            for grid in slides
        ]
        feats = None

    train_idx, test_idx = stratified_split(labels, recipe.test_fraction, recipe.split_seed)
    if seeds is None:
        seeds = list(range(1, recipe.seeds + 1))

    report = EvalReport(task=recipe.task, representation=recipe.representation)
    for run_seed in seeds:
        m = _one_classifier_run(
            feats, bags, labels, train_idx, test_idx, n_classes, class_names,
            recipe, run_seed, model.dtype,
        )
        report.add(run_seed, m)
    return report


def _one_classifier_run(
    feats, bags, labels, train_idx, test_idx, n_classes, class_names,
    recipe, run_seed: int, dtype,
) -> MetricSet:
    fit_idx, val_idx = stratified_split(
        labels[train_idx], recipe.val_fraction, run_seed
    )
    fit_idx = train_idx[fit_idx]
    val_idx = train_idx[val_idx]

    present = set(np.unique(labels[fit_idx]).tolist())
    missing = [class_names[c] for c in range(n_classes) if c not in present]
    if missing:
        raise ValueError(f"class absent from train split: {', '.join(missing)}")

    torch.manual_seed(run_seed + 0x5EED)
    if feats is not None:
        net = nn.Linear(feats.shape[1], n_classes).to(dtype)
        def score_fn(idx):
            return net(feats[idx])
        params = list(net.parameters())
    else:
        net = RawBagClassifier(bags[0].shape[1], n_classes).to(dtype)
        def score_fn(idx):
            return torch.stack([net(bags[i]) for i in idx])
        params = list(net.parameters())

    optimizer = torch.optim.Adam(params, lr=recipe.lr, weight_decay=recipe.weight_decay)
    stopper = EarlyStopper(patience=recipe.patience)
    best_state = None
    order_rng = np.random.default_rng(run_seed)
    labels_t = torch.as_tensor(labels)

    total_epochs = recipe.epochs
    for epoch in range(1, total_epochs + 1):
        lr = recipe.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / total_epochs))
        for group in optimizer.param_groups:
            group["lr"] = lr
        net.train()
        order = fit_idx[order_rng.permutation(len(fit_idx))]
        for start in range(0, len(order), recipe.batch_size):
            idx = order[start : start + recipe.batch_size]
            logits = score_fn(idx)
            loss = F.cross_entropy(logits, labels_t[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        if len(val_idx) == 0:
            continue  # degenerate tiny split: no early stopping signal
        net.eval()
        with torch.no_grad():
            val_pred = score_fn(val_idx).argmax(dim=1).numpy()
        val_recall = balanced_accuracy_score(labels[val_idx], val_pred)
        improved = stopper.best is None or val_recall > stopper.best
        if improved:
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        if stopper.update(epoch, float(val_recall)):
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    with torch.no_grad():
        scores = score_fn(test_idx).numpy()
    return metrics(labels[test_idx], scores, n_classes)
