"""astralab: multi-model slide representation learning on a shared spatial grid.

Pipeline stages: synthetic cohort generation -> masked multi-target
reconstruction pretraining with a sparse-MoE contextualizer -> structured
prompt alignment -> slide classification, text-guided localization, and
expert-routing analysis.
"""

from .alignment import AlignmentBatch, GatedAttentionPool, symmetric_contrastive_loss
from .archive import load_cohort, load_slide, save_cohort, save_slide
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, default_config_text, load_config, parse_config
from .decoder import DecoderConfig, HierarchicalDecoder, recon_loss, total_pretrain_loss
from .encoder import (
    EncoderConfig,
    RoutingRecord,
    SpatialMoeEncoder,
    load_balance_loss,
)
from .estimators import (
    PromptAligner,
    SlideLevelClassifier,
    SpatialContextualizer,
    TextGuidedLocalizer,
)
from .evaluation import (
    EvalReport,
    LinearHead,
    LocalizationResult,
    MetricSet,
    classify,
    dice,
    localize,
    metrics,
    stratified_summary,
)
from .grid import (
    Category,
    GridSpec,
    RegionLabel,
    SlideGrid,
    SlideRecord,
    build_shared_grid,
    tissue_coverage,
)
from .model import AstraModel, build_model
from .registry import ModelRegistry, ModelSpec, desk_registry, reference_registry
from .routing import ExpertMap, expert_map, top_tiles_per_expert
from .sampling import (
    CropBatch,
    CropWindow,
    apply_mask,
    make_crop_batch,
    sample_window,
    select_input_model,
)
from .synth import ClassProfile, SynthConfig, generate_cohort, generate_synthetic_slide
from .text import (
    HashingTextEncoder,
    PROMPT_TEMPLATES,
    build_prompt,
    get_text_encoder,
    mock_text_encode,
)
from .trainer import align, masked_cosine_eval, pretrain, train_classifier

__version__ = "0.1.0"
