"""Training loop, loss, LR schedule, checkpointing, and the run config.

A run is described by one declarative JSON config (see ``RunConfig``).
Training is seeded end to end: weight init, batch order, augmentation and
delta-path dropout all derive from ``seed``, so two runs with the same
config produce identical loss curves on CPU.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones import BackboneSpec, build_backbone
from .data import BiTemporalSample, augment, load_dataset
from .errors import ConfigurationError, ShapeError
from .fusion import DEFAULT_ASPP_RATES, FusionDecoder
from .metrics import ConfusionCounts, accumulate, report, sliding_window_infer
from .peft import PeftConfig, base_checksum, count_params, freeze_base, inject
from .siamese import (
    DEFAULT_SWAP_INDICES,
    ChangeDetector,
    ExchangeSpec,
    FpnResDecoder,
    fuse_predictions,
)

DECODERS = ("fpn_res", "mfce")


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01


@dataclass
class DataConfig:
    root: str = "data/synth"
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"


@dataclass
class RunConfig:
    """Full experiment description; round-trips through JSON."""

    backbone: BackboneSpec
    peft: PeftConfig | None = None
    decoder: str = "mfce"
    exchange: ExchangeSpec = field(default_factory=ExchangeSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 8
    warmup_steps: int = 100
    max_steps: int = 2000
    eval_interval: int = 100
    log_interval: int = 10
    seed: int = 0
    decoder_channels: int = 128
    aspp_rates: tuple[int, ...] = DEFAULT_ASPP_RATES
    aspp_pool: bool = True
    stage_factors: tuple[int, ...] | None = None
    crop_size: int | None = None
    eval_window: int | None = None
    eval_stride: int | None = None
    stop_at_val_iou: float | None = None
    pos_grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ConfigurationError(f"unknown decoder {self.decoder!r}")
        if self.decoder == "fpn_res" and self.backbone.kind != "hierarchical":
            raise ConfigurationError("decoder fpn_res requires a hierarchical backbone")
        if self.decoder == "mfce" and self.backbone.kind != "plain_vit":
            raise ConfigurationError("decoder mfce requires a plain_vit backbone")
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.warmup_steps < 0 or self.max_steps < 0:
            raise ConfigurationError("step counts must be >= 0")
        if self.eval_window is not None and self.eval_stride is None:
            self.eval_stride = self.eval_window // 2
        self.aspp_rates = tuple(self.aspp_rates)
        if self.stage_factors is not None:
            self.stage_factors = tuple(self.stage_factors)
        if self.pos_grid is not None:
            self.pos_grid = tuple(self.pos_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.peft is None:
            d["peft"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["backbone"] = BackboneSpec(**d["backbone"])
        if d.get("peft") is not None:
            d["peft"] = PeftConfig(**d["peft"])
        if "exchange" in d and d["exchange"] is not None:
            d["exchange"] = ExchangeSpec(**d["exchange"])
        if "optimizer" in d and d["optimizer"] is not None:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        if "data" in d and d["data"] is not None:
            d["data"] = DataConfig(**d["data"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class TrainState:
    """Progress record kept by ``train``; best_val_iou never decreases."""

    step: int = 0
    best_val_iou: float = -1.0
    best_checkpoint: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)


def dual_branch_loss(
    logits_a: torch.Tensor, logits_b: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Sum of mean pixel cross-entropies of the two branches against one mask."""
    if not torch.isin(mask.unique(), torch.tensor([0, 1], device=mask.device)).all():
        raise ShapeError("mask must be binary (0/1)")
    target = mask.long()
    return F.cross_entropy(logits_a, target) + F.cross_entropy(logits_b, target)


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup from 0 to the base rate, constant afterwards."""
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    base = cfg.optimizer.lr
    if cfg.warmup_steps == 0:
        return base
    return base * min(1.0, step / cfg.warmup_steps)


def build_model(cfg: RunConfig) -> ChangeDetector:
    """Construct (and PEFT-inject) the change detector described by ``cfg``."""
    encoder = build_backbone(cfg.backbone, cfg.pos_grid)
    if cfg.peft is not None:
        inject(encoder, cfg.peft)
    else:
        freeze_base(encoder)
    stack_channels = _tap_channels(cfg.backbone)
    if cfg.decoder == "fpn_res":
        decoder = FpnResDecoder(stack_channels, cfg.decoder_channels)
    else:
        decoder = FusionDecoder(
            stack_channels,
            cfg.decoder_channels,
            aspp_rates=cfg.aspp_rates,
            aspp_pool=cfg.aspp_pool,
            stage_factors=cfg.stage_factors,
        )
    return ChangeDetector(encoder, decoder, cfg.exchange)


def _tap_channels(spec: BackboneSpec) -> list[int]:
    if spec.kind == "plain_vit":
        return [spec.embed_dim] * len(spec.tap_layers)
    channels, bounds, total = [], [], 0
    for s, d in enumerate(spec.stage_depths):
        total += d
        bounds.append((total, spec.embed_dim * 2 ** s))
    for tap in spec.tap_layers:
        for bound, dim in bounds:
            if tap < bound:
                channels.append(dim)
                break
    return channels


def batch_to_tensors(samples: list[BiTemporalSample]):
    a = torch.from_numpy(np.stack([s.img_a for s in samples]))
    b = torch.from_numpy(np.stack([s.img_b for s in samples]))
    m = torch.from_numpy(np.stack([s.mask for s in samples]))
    return a, b, m


def evaluate_model(
    model: ChangeDetector,
    samples: list[BiTemporalSample],
    window: int | None = None,
    stride: int | None = None,
):
    """Fused-prediction metrics over a sample list; returns a MetricReport."""
    counts = ConfusionCounts()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for s in samples:
            img_a = torch.from_numpy(s.img_a)
            img_b = torch.from_numpy(s.img_b)
            if window is not None:
                probs = sliding_window_infer(
                    model, img_a, img_b, window, stride or max(1, window // 2)
                )
            else:
                logits_a, logits_b = model(img_a.unsqueeze(0), img_b.unsqueeze(0))
                probs = fuse_predictions(logits_a, logits_b)[0]
            pred = probs.argmax(dim=0).numpy()
            counts = accumulate(pred, s.mask, counts)
    if was_training:
        model.train()
    return report(counts), counts


def save_checkpoint(path: str, model: ChangeDetector, cfg: RunConfig, step: int, val_iou: float):
    torch.save(
        {"model": model.state_dict(), "config": cfg.to_dict(), "step": step, "val_iou": val_iou},
        path,
    )


def load_checkpoint(path: str) -> tuple[ChangeDetector, RunConfig, int]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    return model, cfg, payload["step"]


def _augment_seed(seed: int, step: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, step, index]).generate_state(1)[0])


class JsonlLogger:
    def __init__(self, path: str | None):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            # truncate any previous run
            open(path, "w").close()

    def write(self, record: dict):
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def train(cfg: RunConfig, out_dir: str) -> TrainState:
    """Run the training loop; persists best/last checkpoints and a JSONL log.

    The best checkpoint is the one with the highest fused validation IoU.
    The final summary record carries a before/after digest of the frozen
    encoder base weights as a tamper audit.
    """
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    checksum_before = base_checksum(model.encoder)

    train_samples = load_dataset(cfg.data.root, cfg.data.train_split)
    val_samples = load_dataset(cfg.data.root, cfg.data.val_split)
    if not train_samples:
        raise ConfigurationError(f"no training samples under {cfg.data.root}")

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        trainable, lr=cfg.optimizer.lr, weight_decay=cfg.optimizer.weight_decay
    )
    logger = JsonlLogger(os.path.join(out_dir, "log.jsonl"))
    state = TrainState()
    best_path = os.path.join(out_dir, "best.pt")
    last_path = os.path.join(out_dir, "last.pt")
    batch_rng = np.random.default_rng(cfg.seed)
    started = time.time()

    def run_eval(step: int):
        rep, _ = evaluate_model(model, val_samples, cfg.eval_window, cfg.eval_stride)
        state.val_history.append((step, rep.iou))
        logger.write({"kind": "eval", "step": step, "val_iou": rep.iou})
        save_checkpoint(last_path, model, cfg, step, rep.iou)
        if rep.iou > state.best_val_iou:
            state.best_val_iou = rep.iou
            state.best_checkpoint = best_path
            save_checkpoint(best_path, model, cfg, step, rep.iou)
        if best_path not in state.checkpoints:
            state.checkpoints = [best_path, last_path]
        return rep.iou

    model.train()
    stop = False
    for step in range(cfg.max_steps):
        lr = lr_at(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = batch_rng.choice(
            len(train_samples),
            size=min(cfg.batch_size, len(train_samples)),
            replace=len(train_samples) < cfg.batch_size,
        )
        batch = [
            augment(train_samples[i], _augment_seed(cfg.seed, step, int(i)), cfg.crop_size)
            for i in idx
        ]
        img_a, img_b, mask = batch_to_tensors(batch)
        logits_a, logits_b = model(img_a, img_b)
        loss = dual_branch_loss(logits_a, logits_b, mask)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.step = step + 1
        state.loss_history.append(float(loss))
        if step % cfg.log_interval == 0 or step == cfg.max_steps - 1:
            logger.write({"kind": "train", "step": step, "lr": lr, "loss": float(loss)})
        if val_samples and (step + 1) % cfg.eval_interval == 0:
            iou = run_eval(step + 1)
            if cfg.stop_at_val_iou is not None and iou >= cfg.stop_at_val_iou:
                stop = True
                break
    if val_samples and (not stop) and (
        cfg.max_steps == 0 or state.step % cfg.eval_interval != 0 or not state.val_history
    ):
        run_eval(state.step)

    checksum_after = base_checksum(model.encoder)
    trainable_count, total_count = count_params(model)
    logger.write(
        {
            "kind": "summary",
            "steps": state.step,
            "best_val_iou": state.best_val_iou,
            "trainable_params": trainable_count,
            "total_params": total_count,
            "encoder_base_digest_before": checksum_before,
            "encoder_base_digest_after": checksum_after,
            "encoder_base_unchanged": checksum_before == checksum_after,
            "seconds": round(time.time() - started, 3),
        }
    )
    return state
