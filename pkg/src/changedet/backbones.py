"""Toy vision encoders with tappable layers and addressable qkv injection sites.

Two families, sharing the transformer block implementation:

* ``PlainViT`` — a plain ViT that tokenizes once and keeps a fixed spatial
  grid, so every tapped layer has the same spatial shape (single-scale).
* ``HierarchicalViT`` — four transformer stages separated by stride-2 patch
  merging, producing a feature pyramid at strides 4/8/16/32.

Both expose ``encode() -> FeatureStack``, ``injection_sites()`` (the fused
qkv projections, one per block) and ``transformer_blocks()`` (for pre-block
adapter wrapping). Base weights are plain parameters; freezing is handled by
the peft module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ShapeError

HIERARCHICAL_STAGE_STRIDES = (4, 8, 16, 32)


def default_tap_layers(depth: int) -> tuple[int, ...]:
    """Quartile tap rule: layer indices floor(depth*k/4)-1 for k=1..4."""
    return tuple(depth * k // 4 - 1 for k in range(1, 5))


@dataclass
class BackboneSpec:
    """Architecture description for a toy encoder.

    ``patch_size`` applies to plain_vit only; ``stage_depths`` to
    hierarchical only (per-stage block counts, channel width doubling at
    each stage transition). ``tap_layers`` are global block indices whose
    outputs form the feature stack; defaults to the quartile rule for
    plain_vit and to the last block of each stage for hierarchical.
    """

    kind: str
    embed_dim: int
    depth: int
    heads: int
    patch_size: int | None = None
    stage_depths: tuple[int, ...] | None = None
    tap_layers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in ("plain_vit", "hierarchical"):
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        if self.embed_dim <= 0 or self.depth <= 0 or self.heads <= 0:
            raise ConfigurationError("embed_dim, depth and heads must be positive")
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.kind == "plain_vit":
            if self.patch_size is None or self.patch_size <= 0:
                raise ConfigurationError("plain_vit requires a positive patch_size")
            if not self.tap_layers:
                self.tap_layers = default_tap_layers(self.depth)
        else:
            if self.stage_depths is None:
                raise ConfigurationError("hierarchical requires stage_depths")
            self.stage_depths = tuple(self.stage_depths)
            if len(self.stage_depths) != 4 or any(d <= 0 for d in self.stage_depths):
                raise ConfigurationError("stage_depths must be 4 positive block counts")
            if sum(self.stage_depths) != self.depth:
                raise ConfigurationError(
                    f"depth {self.depth} != sum(stage_depths) {sum(self.stage_depths)}"
                )
            if not self.tap_layers:
                taps, total = [], 0
                for d in self.stage_depths:
                    total += d
                    taps.append(total - 1)
                self.tap_layers = tuple(taps)
        self.tap_layers = tuple(self.tap_layers)
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise ConfigurationError(f"tap_layers {self.tap_layers} not strictly increasing")
        if self.tap_layers and self.tap_layers[-1] >= self.depth:
            raise ConfigurationError(
                f"tap layer {self.tap_layers[-1]} out of range for depth {self.depth}"
            )


@dataclass
class FeatureStack:
    """Ordered per-layer feature maps [B,C,H,W] with stride and source metadata."""

    features: list[torch.Tensor]
    strides: list[int]
    layer_ids: list[int]

    def __post_init__(self):
        if len(self.features) < 1:
            raise ShapeError("feature stack must hold at least one map")
        if not (len(self.features) == len(self.strides) == len(self.layer_ids)):
            raise ShapeError("features, strides and layer_ids must have equal length")
        if any(s <= 0 for s in self.strides):
            raise ShapeError(f"strides must be positive, got {self.strides}")

    def __len__(self) -> int:
        return len(self.features)

    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(f.shape[-2:]) for f in self.features]

    def channels(self) -> list[int]:
        return [f.shape[-3] for f in self.features]


def _resize_pos_embed(pos: torch.Tensor, grid: tuple[int, int], target: tuple[int, int]):
    """Bilinearly resample a learned [1, h*w, C] position table to a new grid."""
    if grid == target:
        return pos
    c = pos.shape[-1]
    pos = pos.reshape(1, grid[0], grid[1], c).permute(0, 3, 1, 2)
    pos = F.interpolate(pos, size=target, mode="bilinear", align_corners=False)
    return pos.permute(0, 2, 3, 1).reshape(1, target[0] * target[1], c)


class Attention(nn.Module):
    """Multi-head self-attention over a flat token sequence.

    The fused qkv projection (dim -> 3*dim) is the single addressable
    injection site of the block.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm transformer block with an optional pre-block adapter slot.

    ``self.adapter`` is populated by peft injection; when present it runs on
    the block input (residual form), before attention.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)
        self.adapter: nn.Module | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.adapter is not None:
            x = self.adapter(x)
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _init_transformer(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class PlainViT(nn.Module):
    """Single-scale ViT encoder: every tapped layer shares the token grid.

    Learned position embeddings are sized to ``pos_grid`` (the training
    grid) and bilinearly resized for other input sizes, so windowed
    inference on odd shapes works.
    """

    def __init__(self, spec: BackboneSpec, pos_grid: tuple[int, int] = (8, 8)):
        super().__init__()
        if spec.kind != "plain_vit":
            raise ConfigurationError(f"PlainViT requires kind plain_vit, got {spec.kind}")
        self.spec = spec
        self.pos_grid = tuple(pos_grid)
        self.patch = nn.Conv2d(3, spec.embed_dim, spec.patch_size, stride=spec.patch_size)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, self.pos_grid[0] * self.pos_grid[1], spec.embed_dim)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.embed_dim, spec.heads) for _ in range(spec.depth)
        )
        self.norm = nn.LayerNorm(spec.embed_dim)
        self.apply(_init_transformer)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed_patches(self, image: torch.Tensor) -> torch.Tensor:
        """Tokenize: [B,3,H,W] -> [B,embed_dim,H/p,W/p]. H and W must divide by p."""
        p = self.spec.patch_size
        h, w = image.shape[-2:]
        if h % p != 0:
            raise ShapeError(f"image height {h} not divisible by patch size {p}")
        if w % p != 0:
            raise ShapeError(f"image width {w} not divisible by patch size {p}")
        return self.patch(image)

    def encode(self, image: torch.Tensor) -> FeatureStack:
        grid = self.embed_patches(image)
        b, c, h, w = grid.shape
        x = grid.flatten(2).transpose(1, 2)
        x = x + _resize_pos_embed(self.pos_embed, self.pos_grid, (h, w))
        taps = set(self.spec.tap_layers)
        feats: list[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in taps:
                feats.append(self.norm(x).transpose(1, 2).reshape(b, c, h, w))
        stride = self.spec.patch_size
        return FeatureStack(
            features=feats,
            strides=[stride] * len(feats),
            layer_ids=list(self.spec.tap_layers),
        )

    forward = encode

    def injection_sites(self) -> list[tuple[str, nn.Linear]]:
        """Addressable qkv sites, one per block, in depth order."""
        return [(f"blocks.{i}.attn.qkv", blk.attn.qkv) for i, blk in enumerate(self.blocks)]

    def transformer_blocks(self) -> list[TransformerBlock]:
        return list(self.blocks)


class PatchMerge(nn.Module):
    """Stride-2 spatial downsampling with channel doubling between stages."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduce = nn.Conv2d(dim, dim * 2, kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reduce(x)


class HierarchicalViT(nn.Module):
    """Four-stage pyramid encoder: transformer stages joined by patch merging.

    Stage ``i`` runs at stride ``4 * 2**i`` with width ``embed_dim * 2**i``.
    Only the stride contract matters downstream; attention within a stage is
    plain and global.
    """

    def __init__(self, spec: BackboneSpec, pos_grid: tuple[int, int] = (16, 16)):
        super().__init__()
        if spec.kind != "hierarchical":
            raise ConfigurationError(f"HierarchicalViT requires kind hierarchical, got {spec.kind}")
        self.spec = spec
        self.pos_grid = tuple(pos_grid)
        self.patch = nn.Conv2d(3, spec.embed_dim, 4, stride=4)
        self.pos_embed = nn.Parameter(
            torch.zeros(1, self.pos_grid[0] * self.pos_grid[1], spec.embed_dim)
        )
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        dim = spec.embed_dim
        for s, n_blocks in enumerate(spec.stage_depths):
            self.stages.append(
                nn.ModuleList(TransformerBlock(dim, spec.heads) for _ in range(n_blocks))
            )
            if s < 3:
                self.merges.append(PatchMerge(dim))
                dim *= 2
        self.stage_dims = tuple(spec.embed_dim * 2 ** s for s in range(4))
        self.apply(_init_transformer)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed_patches(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h % 4 != 0:
            raise ShapeError(f"image height {h} not divisible by patch size 4")
        if w % 4 != 0:
            raise ShapeError(f"image width {w} not divisible by patch size 4")
        return self.patch(image)

    def encode(self, image: torch.Tensor) -> FeatureStack:
        h, w = image.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(
                f"hierarchical encoder needs sizes divisible by 32, got {h}x{w}"
            )
        grid = self.embed_patches(image)
        b = grid.shape[0]
        gh, gw = grid.shape[-2:]
        x = grid.flatten(2).transpose(1, 2)
        x = x + _resize_pos_embed(self.pos_embed, self.pos_grid, (gh, gw))
        taps = set(self.spec.tap_layers)
        feats: list[torch.Tensor] = []
        tap_ids: list[int] = []
        tap_strides: list[int] = []
        layer = 0
        for s, stage in enumerate(self.stages):
            dim = self.stage_dims[s]
            for block in stage:
                x = block(x)
                if layer in taps:
                    feats.append(x.transpose(1, 2).reshape(b, dim, gh, gw))
                    tap_ids.append(layer)
                    tap_strides.append(HIERARCHICAL_STAGE_STRIDES[s])
                layer += 1
            if s < 3:
                grid = x.transpose(1, 2).reshape(b, dim, gh, gw)
                grid = self.merges[s](grid)
                gh, gw = grid.shape[-2:]
                x = grid.flatten(2).transpose(1, 2)
        return FeatureStack(features=feats, strides=tap_strides, layer_ids=tap_ids)

    forward = encode

    def injection_sites(self) -> list[tuple[str, nn.Linear]]:
        sites = []
        for s, stage in enumerate(self.stages):
            for j, blk in enumerate(stage):
                sites.append((f"stages.{s}.{j}.attn.qkv", blk.attn.qkv))
        return sites

    def transformer_blocks(self) -> list[TransformerBlock]:
        return [blk for stage in self.stages for blk in stage]


def build_backbone(spec: BackboneSpec, pos_grid: tuple[int, int] | None = None) -> nn.Module:
    if spec.kind == "plain_vit":
        return PlainViT(spec, pos_grid or (8, 8))
    return HierarchicalViT(spec, pos_grid or (16, 16))
