"""Bi-temporal Siamese pipeline: layer exchange, FPN, ResBlock decoding.

One weight-shared encoder and one weight-shared decoder are applied to both
temporal inputs. Between encode and decode, selected feature levels are
swapped across the two streams, producing mixed-temporal stacks. Each branch
emits full-resolution 2-class logits (no-change, change); at inference the
two branch probability maps are averaged pixel-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import FeatureStack
from .errors import ConfigurationError, ShapeError

DEFAULT_SWAP_INDICES = (0, 2)


@dataclass
class ExchangeSpec:
    """Which feature-stack entries to swap between the two temporal streams."""

    swap_indices: tuple[int, ...] = DEFAULT_SWAP_INDICES

    def __post_init__(self):
        self.swap_indices = tuple(sorted(set(self.swap_indices)))
        if any(i < 0 for i in self.swap_indices):
            raise ConfigurationError(f"swap indices must be >= 0, got {self.swap_indices}")


def exchange(
    stack_a: FeatureStack, stack_b: FeatureStack, spec: ExchangeSpec
) -> tuple[FeatureStack, FeatureStack]:
    """Swap the selected levels between streams; an involution.

    Tensors are moved by reference, never copied or modified.
    """
    if len(stack_a) != len(stack_b):
        raise ShapeError(f"stack lengths differ: {len(stack_a)} vs {len(stack_b)}")
    for i, (fa, fb) in enumerate(zip(stack_a.features, stack_b.features)):
        if fa.shape != fb.shape:
            raise ShapeError(f"level {i} shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    if spec.swap_indices and spec.swap_indices[-1] >= len(stack_a):
        raise ConfigurationError(
            f"swap index {spec.swap_indices[-1]} out of range for {len(stack_a)} levels"
        )
    feats_a = list(stack_a.features)
    feats_b = list(stack_b.features)
    for i in spec.swap_indices:
        feats_a[i], feats_b[i] = feats_b[i], feats_a[i]
    out_a = FeatureStack(feats_a, list(stack_a.strides), list(stack_a.layer_ids))
    out_b = FeatureStack(feats_b, list(stack_b.strides), list(stack_b.layer_ids))
    return out_a, out_b


class Fpn(nn.Module):
    """Top-down feature pyramid: lateral 1x1, upsample-add, 3x3 smoothing.

    Requires a multi-scale stack (strictly decreasing spatial sizes); all
    outputs share ``out_channels`` and keep their input sizes.
    """

    def __init__(self, in_channels: list[int], out_channels: int = 128):
        super().__init__()
        self.out_channels = out_channels
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooths = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels
        )

    def forward(self, stack: FeatureStack) -> FeatureStack:
        sizes = stack.spatial_shapes()
        for (ha, wa), (hb, wb) in zip(sizes, sizes[1:]):
            if not (hb < ha and wb < wa):
                raise ShapeError(
                    "FPN needs strictly decreasing spatial sizes; same-scale stacks "
                    "belong to the attention-fusion decoder"
                )
        if len(stack) != len(self.laterals):
            raise ShapeError(f"expected {len(self.laterals)} levels, got {len(stack)}")
        laterals = [lat(f) for lat, f in zip(self.laterals, stack.features)]
        merged = [laterals[-1]]
        for lvl in range(len(laterals) - 2, -1, -1):
            up = F.interpolate(merged[0], size=sizes[lvl], mode="bilinear", align_corners=False)
            merged.insert(0, laterals[lvl] + up)
        outs = [smooth(m) for smooth, m in zip(self.smooths, merged)]
        return FeatureStack(outs, list(stack.strides), list(stack.layer_ids))


class ResBlock(nn.Module):
    """Two 3x3 convs with a skip connection; identity when convs are zero."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class FpnResDecoder(nn.Module):
    """FPN fusion followed by coarse-to-fine ResBlock refinement.

    Walks the pyramid from the coarsest level: ResBlock, x2 upsample, add the
    next finer map. The finest fused map gets its own ResBlock, then a final
    bilinear resize and 1x1 head produce 2-class logits at full resolution.
    """

    def __init__(self, in_channels: list[int], channels: int = 128):
        super().__init__()
        self.fpn = Fpn(in_channels, channels)
        self.resblocks = nn.ModuleList(ResBlock(channels) for _ in in_channels)
        self.head = nn.Conv2d(channels, 2, 1)

    def forward(self, stack: FeatureStack, out_size: tuple[int, int]) -> torch.Tensor:
        pyramid = self.fpn(stack)
        feats = pyramid.features
        x = feats[-1]
        for lvl in range(len(feats) - 1, 0, -1):
            x = self.resblocks[lvl](x)
            x = F.interpolate(
                x, size=feats[lvl - 1].shape[-2:], mode="bilinear", align_corners=False
            )
            x = x + feats[lvl - 1]
        x = self.resblocks[0](x)
        x = F.interpolate(x, size=out_size, mode="bilinear", align_corners=False)
        return self.head(x)


def fuse_predictions(logits_a: torch.Tensor, logits_b: torch.Tensor) -> torch.Tensor:
    """Average the two branch softmax probability maps pixel-wise."""
    if logits_a.shape != logits_b.shape:
        raise ShapeError(
            f"branch shapes differ: {tuple(logits_a.shape)} vs {tuple(logits_b.shape)}"
        )
    probs_a = logits_a.softmax(dim=-3)
    probs_b = logits_b.softmax(dim=-3)
    return 0.5 * (probs_a + probs_b)


class ChangeDetector(nn.Module):
    """Weight-shared encoder + exchange + weight-shared decoder, two branches."""

    def __init__(self, encoder: nn.Module, decoder: nn.Module, exchange_spec: ExchangeSpec):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.exchange_spec = exchange_spec

    def forward(
        self, img_a: torch.Tensor, img_b: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if img_a.shape != img_b.shape:
            raise ShapeError(
                f"temporal images differ in shape: {tuple(img_a.shape)} vs {tuple(img_b.shape)}"
            )
        out_size = img_a.shape[-2:]
        stack_a = self.encoder.encode(img_a)
        stack_b = self.encoder.encode(img_b)
        stack_a, stack_b = exchange(stack_a, stack_b, self.exchange_spec)
        logits_a = self.decoder(stack_a, out_size)
        logits_b = self.decoder(stack_b, out_size)
        return logits_a, logits_b

    def fused_probs(self, img_a: torch.Tensor, img_b: torch.Tensor) -> torch.Tensor:
        logits_a, logits_b = self(img_a, img_b)
        return fuse_predictions(logits_a, logits_b)
