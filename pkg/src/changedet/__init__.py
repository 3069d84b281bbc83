"""Siamese change detection with parameter-efficient fine-tuning."""

from .backbones import BackboneSpec, FeatureStack, HierarchicalViT, PlainViT, build_backbone
from .data import BiTemporalSample, SynthSpec, augment, generate, generate_dataset, load_dataset
from .errors import ConfigurationError, ShapeError
from .fusion import FusionDecoder, fuse_by_scores
from .metrics import (
    ConfusionCounts,
    MetricReport,
    accumulate,
    render_overlay,
    report,
    sliding_window_infer,
    tile,
)
from .peft import (
    BottleneckAdapter,
    LoRALinear,
    PeftConfig,
    count_params,
    freeze_base,
    inject,
)
from .siamese import (
    ChangeDetector,
    ExchangeSpec,
    Fpn,
    FpnResDecoder,
    ResBlock,
    exchange,
    fuse_predictions,
)
from .training import RunConfig, TrainState, build_model, dual_branch_loss, lr_at, train

__all__ = [
    "BackboneSpec",
    "BiTemporalSample",
    "BottleneckAdapter",
    "ChangeDetector",
    "ConfigurationError",
    "ConfusionCounts",
    "ExchangeSpec",
    "FeatureStack",
    "Fpn",
    "FpnResDecoder",
    "FusionDecoder",
    "HierarchicalViT",
    "LoRALinear",
    "MetricReport",
    "PeftConfig",
    "PlainViT",
    "ResBlock",
    "RunConfig",
    "ShapeError",
    "SynthSpec",
    "TrainState",
    "accumulate",
    "augment",
    "build_backbone",
    "build_model",
    "count_params",
    "dual_branch_loss",
    "exchange",
    "freeze_base",
    "fuse_by_scores",
    "fuse_predictions",
    "generate",
    "generate_dataset",
    "inject",
    "load_dataset",
    "lr_at",
    "render_overlay",
    "report",
    "sliding_window_infer",
    "tile",
    "train",
]
