"""Decoder for single-scale ViT feature stacks.

Plain-ViT taps all share one spatial grid, so there is no pyramid to feed an
FPN. This decoder instead (1) projects every tapped layer to a common width,
(2) fuses them with per-pixel attention weights (softmax across layers),
(3) enlarges the receptive field with parallel dilated depthwise-separable
convolutions plus global pooling, and (4) restores resolution with three
bilinear-upsample + depthwise-separable refinement stages.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import FeatureStack
from .errors import ConfigurationError, ShapeError

DEFAULT_ASPP_RATES = (1, 6, 12, 18)


def fuse_by_scores(
    xs: list[torch.Tensor], scores: list[torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel convex combination of layers, weighted by softmaxed scores.

    ``xs`` are N maps [B,C,H,W]; ``scores`` are N score maps [B,1,H,W].
    Returns (fused [B,C,H,W], weights [B,N,H,W]); the weights sum to 1 at
    every pixel.
    """
    if len(xs) == 0:
        raise ShapeError("cannot fuse an empty layer list")
    if len(xs) != len(scores):
        raise ShapeError(f"{len(xs)} maps but {len(scores)} score maps")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"layer shapes differ: {tuple(x.shape)} vs {tuple(shape)}")
    stacked_scores = torch.cat(scores, dim=1)
    weights = stacked_scores.softmax(dim=1)
    stacked = torch.stack(xs, dim=1)
    fused = (weights.unsqueeze(2) * stacked).sum(dim=1)
    return fused, weights


class DepthwiseSeparableConv(nn.Module):
    """Dilated depthwise 3x3 (replicate padding) followed by pointwise 1x1.

    Replicate padding keeps constant inputs constant, so the module behaves
    like a translation-invariant filter even at the borders. The dilation
    used in ``forward`` can be clamped below the configured rate when the
    input is too small for the full receptive field.
    """

    def __init__(self, channels: int, out_channels: int, dilation: int = 1, relu: bool = True):
        super().__init__()
        self.dilation = dilation
        self.depthwise = nn.Conv2d(channels, channels, 3, groups=channels)
        self.pointwise = nn.Conv2d(channels, out_channels, 1)
        self.relu = relu

    def effective_dilation(self, size: tuple[int, int]) -> int:
        return max(1, min(self.dilation, (min(size) - 1) // 2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.effective_dilation(x.shape[-2:])
        x = F.pad(x, (d, d, d, d), mode="replicate")
        x = F.conv2d(x, self.depthwise.weight, self.depthwise.bias,
                     dilation=d, groups=self.depthwise.groups)
        x = self.pointwise(x)
        return F.relu(x) if self.relu else x


class DilatedContext(nn.Module):
    """Parallel dilated branches plus optional global pooling, re-projected.

    Spatial shape is preserved. Dilation rates too large for the input are
    clamped per forward pass, so arbitrarily small toy grids still work.
    """

    def __init__(
        self,
        channels: int,
        rates: tuple[int, ...] = DEFAULT_ASPP_RATES,
        global_pool: bool = True,
    ):
        super().__init__()
        if not rates:
            raise ConfigurationError("need at least one dilation rate")
        self.branches = nn.ModuleList(
            DepthwiseSeparableConv(channels, channels, dilation=r) for r in rates
        )
        self.global_pool = global_pool
        if global_pool:
            self.pool_proj = nn.Sequential(nn.Conv2d(channels, channels, 1), nn.ReLU())
        n = len(rates) + (1 if global_pool else 0)
        self.project = nn.Conv2d(n * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [branch(x) for branch in self.branches]
        if self.global_pool:
            pooled = self.pool_proj(x.mean(dim=(-2, -1), keepdim=True))
            outs.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.project(torch.cat(outs, dim=1))


class ProgressiveUpsampler(nn.Module):
    """Three bilinear-upsample + depthwise-separable refinement stages.

    Stage sizes run h -> 2h -> 4h -> target (x2, x2, x4 for features at 1/16
    of the target; the last stage absorbs the remaining factor for other
    strides). A 1x1 head emits 2-class logits at the target size.
    """

    def __init__(self, channels: int, stage_factors: tuple[int, ...] | None = None):
        super().__init__()
        if stage_factors is not None and len(stage_factors) != 3:
            raise ConfigurationError(f"need exactly 3 stage factors, got {stage_factors}")
        self.stage_factors = stage_factors
        self.refines = nn.ModuleList(
            DepthwiseSeparableConv(channels, channels) for _ in range(3)
        )
        self.head = nn.Conv2d(channels, 2, 1)

    def _stage_sizes(self, start: tuple[int, int], target: tuple[int, int]):
        h, w = start
        th, tw = target
        if th % h != 0 or tw % w != 0:
            raise ShapeError(
                f"target {th}x{tw} is not an integer multiple of the feature grid {h}x{w}"
            )
        if self.stage_factors is not None:
            sizes, ch, cw = [], h, w
            for f in self.stage_factors:
                ch, cw = ch * f, cw * f
                sizes.append((ch, cw))
            if sizes[-1] != (th, tw):
                raise ConfigurationError(
                    f"stage factors {self.stage_factors} map {h}x{w} to {sizes[-1]}, "
                    f"not the target {th}x{tw}"
                )
            return sizes
        return [(min(2 * h, th), min(2 * w, tw)), (min(4 * h, th), min(4 * w, tw)), (th, tw)]

    def forward(self, x: torch.Tensor, target_size: tuple[int, int]) -> torch.Tensor:
        for size, refine in zip(self._stage_sizes(x.shape[-2:], target_size), self.refines):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
            x = refine(x)
        return self.head(x)


class FusionDecoder(nn.Module):
    """project -> attention fuse -> dilated context -> progressive upsample."""

    def __init__(
        self,
        in_channels: list[int],
        channels: int = 128,
        aspp_rates: tuple[int, ...] = DEFAULT_ASPP_RATES,
        aspp_pool: bool = True,
        stage_factors: tuple[int, ...] | None = None,
    ):
        super().__init__()
        self.channels = channels
        self.projections = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.scorers = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in in_channels)
        self.context = DilatedContext(channels, aspp_rates, aspp_pool)
        self.upsampler = ProgressiveUpsampler(channels, stage_factors)

    def project(self, stack: FeatureStack) -> list[torch.Tensor]:
        """1x1-project every layer to the common width; same-scale stacks only."""
        shapes = set(stack.spatial_shapes())
        if len(shapes) != 1:
            raise ShapeError(
                f"mixed spatial shapes {sorted(shapes)}; this decoder fuses same-scale "
                "stacks (multi-scale pyramids belong to the FPN decoder)"
            )
        if len(stack) != len(self.projections):
            raise ShapeError(f"expected {len(self.projections)} layers, got {len(stack)}")
        return [proj(f) for proj, f in zip(self.projections, stack.features)]

    def attention_fuse(self, xs: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        scores = [scorer(x) for scorer, x in zip(self.scorers, xs)]
        return fuse_by_scores(xs, scores)

    def forward(self, stack: FeatureStack, out_size: tuple[int, int]) -> torch.Tensor:
        xs = self.project(stack)
        fused, _ = self.attention_fuse(xs)
        ctx = self.context(fused)
        return self.upsampler(ctx, out_size)
