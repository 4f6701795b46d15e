"""Run configuration: flat key=value text with sections, strict schema.

Every key has a documented default; unknown sections or keys are errors.
The same text form is snapshotted verbatim into checkpoints.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .registry import ModelRegistry, make_registry
from .synth import PROFILE_SETS, SynthConfig


@dataclass
class DataConfig:
    registry: str = "desk"
    lattice: int = 32
    slides: int = 64
    profile_set: str = "categories4"
    archetypes: int = 6
    archetype_dim: int = 24
    sigma: float = 0.05
    tumor_fraction: float = 0.45
    blob_radius_min: float = 3.0
    blob_radius_max: float = 7.0
    accent_fraction: float = 0.18
    tissue_fraction: float = 0.62
    model_dropout: float = 0.0
    universe_seed: int = 7


@dataclass
class PretrainRecipe:
    lr: float = 2e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_steps: int = 2000
    grad_clip: float = 1.0
    load_balance_coeff: float = 0.01
    crops_per_slide: int = 20
    batch_size: int = 16
    epochs: int = 10
    max_steps: int = 0  # 0 derives the step budget from epochs
    max_tries: int = 10
    precision: str = "float32"

    def validate(self) -> None:
        positives = ["lr", "weight_decay", "grad_clip", "crops_per_slide",
                     "batch_size", "epochs"]
        for name in positives:
            if getattr(self, name) <= 0 and name not in ("weight_decay",):
                raise ValueError(f"pretrain.{name} must be positive")
        if self.load_balance_coeff < 0:
            raise ValueError("pretrain.load_balance_coeff must be >= 0")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("pretrain betas must lie in (0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("pretrain.precision must be float32 or float64")
        if self.warmup_steps < 1:
            raise ValueError("pretrain.warmup_steps must be >= 1")


@dataclass
class AlignRecipe:
    lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    temperature: float = 0.1
    attn_hidden: int = 256
    attn_dropout: float = 0.25
    freeze_encoder: bool = True
    text_encoder: str = "hash"
    text_seed: int = 0
    input_model: str = "anchor"
    precision: str = "float32"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("align.batch_size must be >= 2 for a contrastive loss")
        if self.temperature <= 0:
            raise ValueError("align.temperature must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("align.precision must be float32 or float64")


@dataclass
class DownstreamRecipe:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    patience: int = 7
    seeds: int = 5
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    split_seed: int = 42
    representation: str = "astra"
    task: str = "category4"
    batch_size: int = 16

    def validate(self) -> None:
        if self.representation not in ("astra", "raw"):
            raise ValueError("downstream.representation must be astra or raw")
        if self.task not in ("category4", "prompt_class"):
            raise ValueError("downstream.task must be category4 or prompt_class")
        if not 0 < self.val_fraction < 1 or not 0 < self.test_fraction < 1:
            raise ValueError("downstream fractions must lie in (0, 1)")
        if self.patience < 1 or self.seeds < 1:
            raise ValueError("downstream.patience and seeds must be >= 1")


@dataclass
class LocalizeConfig:
    threshold: float = 0.15
    exclusion_floor: float = 0.20
    input_model: str = "anchor"
    emit_heatmaps: bool = True
    cell_px: int = 8


@dataclass
class RoutingConfig:
    margin_floor: float = 0.2
    top_tiles: int = 8
    cell_px: int = 8


_SECTION_TYPES = {
    "data": DataConfig,
    "encoder": None,  # handled explicitly (tuple field)
    "decoder": None,
    "pretrain": PretrainRecipe,
    "align": AlignRecipe,
    "downstream": DownstreamRecipe,
    "localize": LocalizeConfig,
    "routing": RoutingConfig,
}

# Desk-scale encoder/decoder defaults for config files; the dataclass
# defaults keep the full reference widths.
_ENCODER_KEYS = {
    "latent_dim": 128,
    "num_layers": 6,
    "num_heads": 4,
    "num_experts": 4,
    "top_k": 2,
    "expert_hidden": 256,
    "tap_layers": "2,4,6",
}
_DECODER_KEYS = {
    "decoder_dim": 64,
    "num_heads": 4,
}

_DOCS = {
    "data.registry": "embedding-space widths: desk | reference",
    "data.lattice": "synthetic lattice cells per side (>= 16)",
    "data.slides": "cohort size for synth-data",
    "data.profile_set": "class content profiles: categories4 | prompts8",
    "data.archetypes": "region archetype count (prompts8 needs >= 10)",
    "data.archetype_dim": "latent code width behind every archetype",
    "data.sigma": "per-model embedding noise level",
    "data.tumor_fraction": "target lesion fraction of tissue for blob classes",
    "data.blob_radius_min": "lesion blob radius lower bound (cells)",
    "data.blob_radius_max": "lesion blob radius upper bound (cells)",
    "data.accent_fraction": "accent-archetype fraction of tissue",
    "data.tissue_fraction": "tissue foreground fraction of the lattice",
    "data.model_dropout": "per-cell dropout of non-anchor model coverage",
    "data.universe_seed": "seed of the shared archetype codes and model maps",
    "encoder.latent_dim": "shared latent width (reference 1536)",
    "encoder.num_layers": "encoder depth",
    "encoder.num_heads": "attention heads (reference 8)",
    "encoder.num_experts": "experts per MoE layer",
    "encoder.top_k": "experts activated per token",
    "encoder.expert_hidden": "expert MLP hidden width (reference 4x latent)",
    "encoder.tap_layers": "1-indexed layers feeding the decoder blocks",
    "decoder.decoder_dim": "decoder width (reference 512)",
    "decoder.num_heads": "decoder attention heads",
    "pretrain.lr": "peak learning rate",
    "pretrain.weight_decay": "decoupled weight decay",
    "pretrain.beta1": "first moment coefficient",
    "pretrain.beta2": "second moment coefficient",
    "pretrain.warmup_steps": "linear warmup steps (must be <= total steps)",
    "pretrain.grad_clip": "global gradient-norm ceiling",
    "pretrain.load_balance_coeff": "weight of the expert balance term",
    "pretrain.crops_per_slide": "crops sampled per slide per epoch",
    "pretrain.batch_size": "crops per optimization step",
    "pretrain.epochs": "training epochs when max_steps = 0",
    "pretrain.max_steps": "hard step budget; 0 derives it from epochs",
    "pretrain.max_tries": "window draws before the coverage fallback",
    "pretrain.precision": "float32 | float64 (float64 for determinism checks)",
    "align.lr": "alignment learning rate",
    "align.weight_decay": "alignment weight decay",
    "align.epochs": "alignment epochs",
    "align.batch_size": "slides per contrastive batch (incomplete final dropped)",
    "align.temperature": "contrastive temperature",
    "align.attn_hidden": "gated attention hidden width",
    "align.attn_dropout": "gated attention dropout",
    "align.freeze_encoder": "keep pretrained encoder fixed during alignment",
    "align.text_encoder": "registered text encoder plug-in name",
    "align.text_seed": "seed of the text encoder plug-in",
    "align.input_model": "embedding space fed to the encoder: anchor or a model name",
    "align.precision": "float32 | float64",
    "downstream.lr": "classifier learning rate",
    "downstream.weight_decay": "classifier weight decay",
    "downstream.epochs": "max classifier epochs",
    "downstream.patience": "early-stop patience on validation macro recall",
    "downstream.seeds": "independently seeded runs",
    "downstream.val_fraction": "stratified internal validation share",
    "downstream.test_fraction": "held-out test share of the cohort",
    "downstream.split_seed": "seed of the train/test split",
    "downstream.representation": "slide features: astra | raw",
    "downstream.task": "label set: category4 | prompt_class",
    "downstream.batch_size": "slides per classifier step",
    "localize.threshold": "fixed similarity threshold",
    "localize.exclusion_floor": "minimum reference tumor share of tissue",
    "localize.input_model": "embedding space for localization",
    "localize.emit_heatmaps": "write per-slide heatmap images",
    "localize.cell_px": "rendered pixels per grid cell",
    "routing.margin_floor": "minimum top-1 margin for exemplar tiles",
    "routing.top_tiles": "exemplars kept per expert",
    "routing.cell_px": "rendered pixels per grid cell",
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder_kv: dict = field(default_factory=lambda: dict(_ENCODER_KEYS))
    decoder_kv: dict = field(default_factory=lambda: dict(_DECODER_KEYS))
    pretrain: PretrainRecipe = field(default_factory=PretrainRecipe)
    align: AlignRecipe = field(default_factory=AlignRecipe)
    downstream: DownstreamRecipe = field(default_factory=DownstreamRecipe)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)

    # -- derived objects -------------------------------------------------

    def registry(self) -> ModelRegistry:
        return make_registry(self.data.registry)

    def synth_config(self) -> SynthConfig:
        d = self.data
        if d.profile_set not in PROFILE_SETS:
            raise ValueError(
                f"data.profile_set {d.profile_set!r} not in {sorted(PROFILE_SETS)}"
            )
        from .grid import Category

        profiles = PROFILE_SETS[d.profile_set]()
        # tumor_fraction steers the malignant lesion load; other classes
        # keep their profile-specific fractions.
        profiles = [
            type(p)(**{**p.__dict__, "blob_fraction": d.tumor_fraction})
            if p.blob_archetype is not None and p.category == Category.MALIGNANT
            else p
            for p in profiles
        ]
        return SynthConfig(
            registry=self.registry(),
            lattice=d.lattice,
            archetypes=d.archetypes,
            archetype_dim=d.archetype_dim,
            sigma=d.sigma,
            blob_radius=(d.blob_radius_min, d.blob_radius_max),
            accent_fraction=d.accent_fraction,
            tissue_fraction=d.tissue_fraction,
            model_dropout=d.model_dropout,
            profiles=profiles,
            universe_seed=d.universe_seed,
        )

    def encoder_config(self) -> EncoderConfig:
        kv = self.encoder_kv
        taps = tuple(int(x) for x in str(kv["tap_layers"]).split(","))
        return EncoderConfig(
            latent_dim=int(kv["latent_dim"]),
            num_layers=int(kv["num_layers"]),
            num_heads=int(kv["num_heads"]),
            num_experts=int(kv["num_experts"]),
            top_k=int(kv["top_k"]),
            expert_hidden=int(kv["expert_hidden"]),
            tap_layers=taps,
        )

    def decoder_config(self) -> DecoderConfig:
        kv = self.decoder_kv
        return DecoderConfig(
            decoder_dim=int(kv["decoder_dim"]), num_heads=int(kv["num_heads"])
        )

    def input_model_id(self, name: str) -> int:
        registry = self.registry()
        if name == "anchor":
            return registry.anchor.model_id
        return registry.by_name(name).model_id

    def validate(self) -> None:
        self.pretrain.validate()
        self.align.validate()
        self.downstream.validate()
        self.synth_config()
        self.encoder_config()
        self.decoder_config()

    # -- text form ---------------------------------------------------------

    def to_text(self, with_docs: bool = False) -> str:
        out = io.StringIO()

        def emit(section: str, pairs: dict):
            out.write(f"[{section}]\n")
            for key, value in pairs.items():
                if with_docs:
                    doc = _DOCS.get(f"{section}.{key}")
                    if doc:
                        out.write(f"# {doc}\n")
                if isinstance(value, bool):
                    value = "true" if value else "false"
                out.write(f"{key} = {value}\n")
            out.write("\n")

        emit("data", _as_pairs(self.data))
        emit("encoder", self.encoder_kv)
        emit("decoder", self.decoder_kv)
        emit("pretrain", _as_pairs(self.pretrain))
        emit("align", _as_pairs(self.align))
        emit("downstream", _as_pairs(self.downstream))
        emit("localize", _as_pairs(self.localize))
        emit("routing", _as_pairs(self.routing))
        return out.getvalue()


def _as_pairs(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _coerce(current, raw: str, where: str):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{where}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{where}: expected a number, got {raw!r}") from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    """Parse config text against the schema; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from None

    cfg = RunConfig()
    known_sections = {"data", "encoder", "decoder", "pretrain", "align",
                      "downstream", "localize", "routing"}
    for section in parser.sections():
        if section not in known_sections:
            raise ValueError(f"unknown config section [{section}]")
        items = dict(parser.items(section))
        if section == "encoder":
            for key, raw in items.items():
                if key not in cfg.encoder_kv:
                    raise ValueError(f"unknown key encoder.{key}")
                cfg.encoder_kv[key] = raw if key == "tap_layers" else int(raw)
            continue
        if section == "decoder":
            for key, raw in items.items():
                if key not in cfg.decoder_kv:
                    raise ValueError(f"unknown key decoder.{key}")
                cfg.decoder_kv[key] = int(raw)
            continue
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        for key, raw in items.items():
            if key not in names:
                raise ValueError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(getattr(target, key), raw, f"{section}.{key}"))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def default_config_text() -> str:
    """The documented default config file."""
    return RunConfig().to_text(with_docs=True)
