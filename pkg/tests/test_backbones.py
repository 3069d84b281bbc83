import pytest
import torch

from changedet.backbones import (
    BackboneSpec,
    FeatureStack,
    HierarchicalViT,
    PlainViT,
    build_backbone,
    default_tap_layers,
)
from changedet.errors import ConfigurationError, ShapeError


class TestBackboneSpec:
    def test_quartile_tap_rule(self):
        assert default_tap_layers(24) == (5, 11, 17, 23)
        assert default_tap_layers(8) == (1, 3, 5, 7)
        assert default_tap_layers(4) == (0, 1, 2, 3)

    def test_defaults_filled(self, toy_vit_spec, tiny_hier_spec):
        assert toy_vit_spec.tap_layers == (1, 3, 5, 7)
        assert tiny_hier_spec.tap_layers == (0, 1, 2, 3)

    def test_tap_layers_must_increase(self):
        with pytest.raises(ConfigurationError):
            BackboneSpec(kind="plain_vit", embed_dim=32, depth=4, heads=4,
                         patch_size=8, tap_layers=(2, 1))

    def test_tap_beyond_depth_rejected(self):
        with pytest.raises(ConfigurationError):
            BackboneSpec(kind="plain_vit", embed_dim=32, depth=4, heads=4,
                         patch_size=8, tap_layers=(1, 4))

    def test_plain_vit_needs_patch_size(self):
        with pytest.raises(ConfigurationError):
            BackboneSpec(kind="plain_vit", embed_dim=32, depth=4, heads=4)

    def test_hierarchical_needs_stage_depths(self):
        with pytest.raises(ConfigurationError):
            BackboneSpec(kind="hierarchical", embed_dim=32, depth=4, heads=4)

    def test_stage_depths_must_sum_to_depth(self):
        with pytest.raises(ConfigurationError):
            BackboneSpec(kind="hierarchical", embed_dim=32, depth=5, heads=4,
                         stage_depths=(1, 1, 1, 1))


class TestFeatureStack:
    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            FeatureStack([], [], [])

    def test_rejects_bad_stride(self):
        with pytest.raises(ShapeError):
            FeatureStack([torch.zeros(1, 2, 4, 4)], [0], [0])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ShapeError):
            FeatureStack([torch.zeros(1, 2, 4, 4)], [8, 8], [0])


class TestPatchEmbed:
    def test_256_with_patch_16_gives_16x16(self):
        spec = BackboneSpec(kind="plain_vit", embed_dim=32, depth=4, heads=4, patch_size=16)
        enc = PlainViT(spec, pos_grid=(16, 16))
        grid = enc.embed_patches(torch.randn(1, 3, 256, 256))
        assert grid.shape == (1, 32, 16, 16)

    def test_64_with_patch_8_dim_64(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        grid = enc.embed_patches(torch.randn(1, 3, 64, 64))
        assert grid.shape == (1, 64, 8, 8)

    def test_non_divisible_names_dimension(self):
        spec = BackboneSpec(kind="plain_vit", embed_dim=32, depth=4, heads=4, patch_size=16)
        enc = PlainViT(spec, pos_grid=(16, 16))
        with pytest.raises(ShapeError, match="height 250"):
            enc.embed_patches(torch.randn(1, 3, 250, 256))
        with pytest.raises(ShapeError, match="width 250"):
            enc.embed_patches(torch.randn(1, 3, 256, 250))


class TestTransformerBlock:
    def test_shape_preserving_and_qkv_fused(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        block = enc.blocks[0]
        x = torch.randn(2, 16, 64)
        assert block(x).shape == x.shape
        assert block.attn.qkv.weight.shape == (192, 64)

    def test_injection_registry_one_site_per_block(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        sites = enc.injection_sites()
        assert len(sites) == 4
        assert [name for name, _ in sites] == [f"blocks.{i}.attn.qkv" for i in range(4)]

    def test_zero_weight_block_is_identity(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        block = enc.blocks[0]
        for mod in (block.attn.qkv, block.attn.proj, block.mlp.fc1, block.mlp.fc2):
            torch.nn.init.zeros_(mod.weight)
            torch.nn.init.zeros_(mod.bias)
        x = torch.randn(2, 16, 64)
        assert torch.equal(block(x), x)


class TestEncode:
    def test_plain_vit_taps_share_spatial_shape(self):
        spec = BackboneSpec(kind="plain_vit", embed_dim=32, depth=24, heads=4,
                            patch_size=16)
        assert spec.tap_layers == (5, 11, 17, 23)
        enc = PlainViT(spec, pos_grid=(4, 4))
        stack = enc.encode(torch.randn(1, 3, 64, 64))
        assert len(stack) == 4
        assert len(set(stack.spatial_shapes())) == 1

    def test_plain_vit_depth8_quartiles(self, toy_vit_spec):
        enc = PlainViT(toy_vit_spec)
        stack = enc.encode(torch.randn(1, 3, 64, 64))
        assert stack.layer_ids == [1, 3, 5, 7]
        assert stack.spatial_shapes() == [(8, 8)] * 4

    def test_hierarchical_stage_sizes(self):
        spec = BackboneSpec(kind="hierarchical", embed_dim=16, depth=4, heads=4,
                            stage_depths=(1, 1, 1, 1))
        enc = HierarchicalViT(spec)
        stack = enc.encode(torch.randn(1, 3, 256, 256))
        assert [s[0] for s in stack.spatial_shapes()] == [64, 32, 16, 8]
        assert stack.strides == [4, 8, 16, 32]
        sizes = stack.spatial_shapes()
        assert all(b < a for (a, _), (b, _) in zip(sizes, sizes[1:]))

    def test_encode_deterministic(self, toy_vit_spec, tiny_hier_spec):
        for enc in (PlainViT(toy_vit_spec), HierarchicalViT(tiny_hier_spec)):
            x = torch.randn(1, 3, 64, 64)
            s1 = enc.encode(x)
            s2 = enc.encode(x)
            for f1, f2 in zip(s1.features, s2.features):
                assert torch.equal(f1, f2)

    def test_perturbed_patch_reaches_matching_token(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        x = torch.randn(1, 3, 64, 64)
        base = enc.encode(x)
        x2 = x.clone()
        x2[:, :, 24:32, 40:48] += 1.0  # patch at grid (3, 5)
        bumped = enc.encode(x2)
        for f0, f1 in zip(base.features, bumped.features):
            assert not torch.allclose(f0[0, :, 3, 5], f1[0, :, 3, 5])

    def test_pos_embed_resized_for_other_input_sizes(self, toy_vit_spec):
        enc = PlainViT(toy_vit_spec)  # trained grid 8x8
        stack = enc.encode(torch.randn(1, 3, 96, 96))
        assert stack.spatial_shapes() == [(12, 12)] * 4

    def test_build_backbone_dispatch(self, toy_vit_spec, tiny_hier_spec):
        assert isinstance(build_backbone(toy_vit_spec), PlainViT)
        assert isinstance(build_backbone(tiny_hier_spec), HierarchicalViT)
