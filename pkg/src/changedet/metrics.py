"""Evaluation: confusion counting, segmentation metrics, windowed inference.

The change class is index 1 everywhere; "IoU" always means change-class IoU.
Undefined-denominator convention: when a metric's denominator is zero and
any error mass exists it is reported as 0.0; when an image is truly
all-negative and the prediction matches, all metrics are 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError
from .siamese import fuse_predictions

OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (0, 255, 0),
    "fn": (255, 0, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel confusion accumulators; merge partial counts with ``+``."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricReport:
    """Overall accuracy, change-class IoU, F1, recall, precision; all in [0,1]."""

    oa: float
    iou: float
    f1: float
    rec: float
    prec: float

    def to_dict(self) -> dict:
        return {"OA": self.oa, "IoU": self.iou, "F1": self.f1, "Rec": self.rec, "Prec": self.prec}


def _as_binary_array(x, name: str) -> np.ndarray:
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ShapeError(f"{name} must be binary (0/1); found values {vals[:8]}")
    return arr.astype(np.int64)


def accumulate(pred, gt, counts: ConfusionCounts = ConfusionCounts()) -> ConfusionCounts:
    """Add the per-pixel confusion of one binary map pair to ``counts``."""
    p = _as_binary_array(pred, "pred")
    g = _as_binary_array(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    tp = int(((p == 1) & (g == 1)).sum())
    tn = int(((p == 0) & (g == 0)).sum())
    fp = int(((p == 1) & (g == 0)).sum())
    fn = int(((p == 0) & (g == 1)).sum())
    return counts + ConfusionCounts(tp, tn, fp, fn)


def report(counts: ConfusionCounts) -> MetricReport:
    """Evaluate the five metrics from accumulated counts."""
    if counts.total <= 0:
        raise ShapeError("cannot report metrics over zero pixels")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    oa = (tp + tn) / counts.total
    if tp + fp + fn == 0:
        # all-negative ground truth, perfectly predicted
        return MetricReport(oa=oa, iou=1.0, f1=1.0, rec=1.0, prec=1.0)
    iou = tp / (tp + fp + fn)
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    rec = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return MetricReport(oa=oa, iou=iou, f1=f1, rec=rec, prec=prec)


def format_report_table(rep: MetricReport) -> str:
    names = ["OA", "IoU", "F1", "Rec", "Prec"]
    vals = [rep.oa, rep.iou, rep.f1, rep.rec, rep.prec]
    header = "".join(f"{n:>10}" for n in names)
    row = "".join(f"{v:>10.4f}" for v in vals)
    return header + "\n" + row


def window_positions(length: int, window: int, stride: int) -> list[int]:
    """Stride-grid start offsets with the final window clamped to the edge."""
    if stride <= 0:
        raise ShapeError(f"stride must be positive, got {stride}")
    if window > length:
        raise ShapeError(f"window {window} larger than image extent {length}")
    positions = list(range(0, length - window + 1, stride))
    if positions[-1] != length - window:
        positions.append(length - window)
    return positions


def sliding_window_infer(
    model, img_a: torch.Tensor, img_b: torch.Tensor, window: int, stride: int
) -> torch.Tensor:
    """Fused change probabilities [2,H,W] from overlapping window passes.

    Windows are placed on a stride grid with the last row/column clamped to
    the image edge; overlapping probabilities are averaged by per-pixel
    coverage. With window == stride == image size this reproduces a direct
    single pass bitwise.
    """
    if img_a.shape != img_b.shape:
        raise ShapeError(f"pair shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    if stride > window:
        raise ShapeError(f"stride {stride} larger than window {window}")
    h, w = img_a.shape[-2:]
    ys = window_positions(h, window, stride)
    xs = window_positions(w, window, stride)
    acc = torch.zeros(2, h, w)
    cover = torch.zeros(1, h, w)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for y in ys:
            for x in xs:
                wa = img_a[..., y : y + window, x : x + window].unsqueeze(0)
                wb = img_b[..., y : y + window, x : x + window].unsqueeze(0)
                logits_a, logits_b = model(wa, wb)
                probs = fuse_predictions(logits_a, logits_b)[0]
                acc[:, y : y + window, x : x + window] += probs
                cover[:, y : y + window, x : x + window] += 1.0
    if was_training:
        model.train()
    return acc / cover


def tile_positions(h: int, w: int, size: int) -> list[tuple[int, int]]:
    """Row-major non-overlapping grid origins; remainder pixels are dropped."""
    if size > h or size > w:
        raise ShapeError(f"tile size {size} exceeds image {h}x{w}")
    return [(y * size, x * size) for y in range(h // size) for x in range(w // size)]


def tile(sample, size: int) -> list:
    """Cut a labeled pair into non-overlapping square patches."""
    from .data import BiTemporalSample

    h, w = sample.mask.shape
    patches = []
    for y, x in tile_positions(h, w, size):
        patches.append(
            BiTemporalSample(
                img_a=sample.img_a[:, y : y + size, x : x + size].copy(),
                img_b=sample.img_b[:, y : y + size, x : x + size].copy(),
                mask=sample.mask[y : y + size, x : x + size].copy(),
                id=f"{sample.id}_{y:05d}_{x:05d}",
            )
        )
    return patches


def render_overlay(pred, gt) -> np.ndarray:
    """RGB error map [H,W,3]: TP white, TN black, FP green, FN red."""
    p = _as_binary_array(pred, "pred")
    g = _as_binary_array(gt, "gt")
    if p.shape != g.shape:
        raise ShapeError(f"pred shape {p.shape} != gt shape {g.shape}")
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[(p == 1) & (g == 1)] = OVERLAY_COLORS["tp"]
    out[(p == 0) & (g == 0)] = OVERLAY_COLORS["tn"]
    out[(p == 1) & (g == 0)] = OVERLAY_COLORS["fp"]
    out[(p == 0) & (g == 1)] = OVERLAY_COLORS["fn"]
    return out
