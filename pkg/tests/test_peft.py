import math

import pytest
import torch
from torch import nn

from changedet.backbones import PlainViT
from changedet.errors import ConfigurationError
from changedet.peft import (
    BottleneckAdapter,
    LoRALinear,
    PeftConfig,
    base_checksum,
    base_parameters,
    count_params,
    count_peft_params,
    freeze_base,
    inject,
    peft_parameters,
)

from conftest import finite_difference_grads, relative_error


def make_lora(d_out, d_in, rank, scale=32.0, dropout=0.0):
    base = nn.Linear(d_in, d_out)
    return LoRALinear(base, rank, scale, dropout)


class TestPeftConfig:
    def test_defaults(self):
        cfg = PeftConfig(strategy="lora")
        assert (cfg.rank, cfg.scale, cfg.dropout, cfg.bottleneck_dim) == (8, 32.0, 0.1, 32)

    def test_rejects_unknown_strategy(self):
        with pytest.raises(ConfigurationError):
            PeftConfig(strategy="bitfit")

    def test_rejects_bad_dropout(self):
        with pytest.raises(ConfigurationError):
            PeftConfig(strategy="lora", dropout=1.0)


class TestLoRAForward:
    def test_zero_b_means_frozen_forward(self):
        lora = make_lora(12, 10, rank=4)
        x = torch.randn(5, 10)
        assert torch.equal(lora(x), lora.base(x))

    def test_scalar_hand_case(self):
        # d=k=r=1 is excluded by the rank bound, so build the state directly
        base = nn.Linear(2, 2, bias=False)
        lora = LoRALinear(base, rank=1, scale=1.0, dropout=0.0)
        with torch.no_grad():
            base.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 2.0]]))
            lora.lora_a.weight.copy_(torch.tensor([[1.0, 0.0]]))
            lora.lora_b.weight.copy_(torch.tensor([[1.0], [0.0]]))
        out = lora(torch.tensor([[5.0, 0.0]]))
        # 2*5 + (1/1)*1*1*5 = 15 on the first coordinate
        assert out[0, 0].item() == pytest.approx(15.0)

    def test_effective_scaling_is_scale_over_rank(self):
        lora = make_lora(12, 10, rank=8, scale=32.0)
        assert lora.scaling == pytest.approx(4.0)

    def test_rank_bound_enforced(self):
        with pytest.raises(ConfigurationError):
            make_lora(8, 8, rank=8)

    def test_dropout_only_in_training_mode(self):
        lora = make_lora(12, 10, rank=4, dropout=0.5)
        with torch.no_grad():
            lora.lora_b.weight.normal_()
        x = torch.randn(64, 10)
        lora.eval()
        assert torch.equal(lora(x), lora(x))
        lora.train()
        torch.manual_seed(1)
        y1 = lora(x)
        torch.manual_seed(2)
        y2 = lora(x)
        assert not torch.equal(y1, y2)


class TestMerge:
    def test_zero_b_merges_to_base(self):
        lora = make_lora(12, 10, rank=4)
        assert torch.equal(lora.merged_weight(), lora.base.weight)

    def test_scalar_merge(self):
        base = nn.Linear(2, 2, bias=False)
        lora = LoRALinear(base, rank=1, scale=1.0, dropout=0.0)
        with torch.no_grad():
            base.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 2.0]]))
            lora.lora_a.weight.copy_(torch.tensor([[1.0, 0.0]]))
            lora.lora_b.weight.copy_(torch.tensor([[1.0], [0.0]]))
        w = lora.merged_weight()
        assert w[0, 0].item() == pytest.approx(3.0)
        assert (w.detach() @ torch.tensor([5.0, 0.0]))[0].item() == pytest.approx(15.0)

    def test_merged_equals_unmerged_random(self):
        torch.manual_seed(7)
        lora = make_lora(8, 8, rank=2)
        with torch.no_grad():
            lora.lora_b.weight.normal_()
        lora.eval()
        x = torch.randn(16, 8)
        assert torch.allclose(lora.merged_forward(x), lora(x), rtol=1e-5, atol=1e-6)


class TestAdapterForward:
    def test_identity_at_init(self):
        ad = BottleneckAdapter(10, 4)
        x = torch.randn(3, 10)
        assert torch.equal(ad(x), x)

    def test_gelu_zero_fixpoint(self):
        ad = BottleneckAdapter(1, 1)
        with torch.no_grad():
            ad.down.weight.fill_(1.0)
            ad.up.weight.fill_(1.0)
        assert ad(torch.zeros(1, 1)).item() == pytest.approx(0.0)

    def test_exact_gelu_hand_case(self):
        ad = BottleneckAdapter(1, 1)
        with torch.no_grad():
            ad.down.weight.fill_(1.0)
            ad.up.weight.fill_(1.0)
        out = ad(torch.tensor([[3.0]]))
        expected = 3.0 * 0.5 * (1 + math.erf(3 / math.sqrt(2))) + 3.0
        assert out.item() == pytest.approx(expected, abs=1e-4)
        assert out.item() == pytest.approx(5.99595, abs=1e-4)


class TestInject:
    def test_lora_site_shapes(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="lora"))
        loras = [m for m in enc.modules() if isinstance(m, LoRALinear)]
        assert len(loras) == 4
        for m in loras:
            assert m.lora_a.weight.shape == (8, 64)
            assert m.lora_b.weight.shape == (192, 8)
        assert count_peft_params(enc) == 4 * 8 * (64 + 192)

    def test_adapter_parameter_count(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="adapter", bottleneck_dim=32))
        adapters = [m for m in enc.modules() if isinstance(m, BottleneckAdapter)]
        assert len(adapters) == 4
        per_block = 64 * 32 + 32 + 32 * 64 + 64
        assert per_block == 4192
        assert count_peft_params(enc) == 4 * per_block == 16768

    def test_double_injection_rejected(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="lora"))
        with pytest.raises(ConfigurationError):
            inject(enc, PeftConfig(strategy="lora"))

    def test_unknown_target_rejected(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        with pytest.raises(ConfigurationError):
            inject(enc, PeftConfig(strategy="lora", targets=(0, 9)))

    def test_target_subset(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="adapter", targets=(0, 2)))
        assert enc.blocks[0].adapter is not None
        assert enc.blocks[1].adapter is None
        assert enc.blocks[2].adapter is not None

    def test_zero_init_equivalence_lora(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        enc.eval()
        x = torch.randn(1, 3, 64, 64)
        before = [f.clone() for f in enc.encode(x).features]
        inject(enc, PeftConfig(strategy="lora"))
        after = enc.encode(x).features
        for f0, f1 in zip(before, after):
            assert torch.equal(f0, f1)

    def test_zero_init_equivalence_adapter(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        enc.eval()
        x = torch.randn(1, 3, 64, 64)
        before = [f.clone() for f in enc.encode(x).features]
        inject(enc, PeftConfig(strategy="adapter"))
        after = enc.encode(x).features
        for f0, f1 in zip(before, after):
            assert torch.equal(f0, f1)


class TestFreeze:
    def test_only_deltas_trainable(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="lora"))
        trainable_ids = {id(p) for p in enc.parameters() if p.requires_grad}
        delta_ids = {id(p) for p in peft_parameters(enc)}
        assert trainable_ids == delta_ids

    def test_base_grads_absent_after_backward(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="lora", dropout=0.0))
        out = enc.encode(torch.randn(1, 3, 64, 64))
        sum(f.sum() for f in out.features).backward()
        for p in base_parameters(enc):
            assert p.grad is None
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in peft_parameters(enc))

    def test_base_unchanged_after_optimizer_steps(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="lora", dropout=0.0))
        digest0 = base_checksum(enc)
        opt = torch.optim.AdamW([p for p in enc.parameters() if p.requires_grad], lr=1e-2)
        for _ in range(100):
            out = enc.encode(torch.randn(1, 3, 64, 64))
            loss = sum(f.pow(2).mean() for f in out.features)
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert base_checksum(enc) == digest0

    def test_freeze_without_injection_freezes_everything(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        freeze_base(enc)
        assert count_params(enc)[0] == 0


class TestCountParams:
    def test_closed_form_lora_count(self, tiny_vit_spec):
        enc = PlainViT(tiny_vit_spec)
        inject(enc, PeftConfig(strategy="lora", rank=8))
        per_site = 8 * (64 + 192)
        assert per_site == 2048
        trainable, total = count_params(enc)
        assert trainable == 4 * per_site == 8192
        assert trainable <= total

    def test_monotone_in_rank_and_bottleneck(self, tiny_vit_spec):
        lora_counts = []
        for rank in (2, 4, 8, 16):
            enc = PlainViT(tiny_vit_spec)
            inject(enc, PeftConfig(strategy="lora", rank=rank))
            lora_counts.append(count_params(enc)[0])
        assert all(b > a for a, b in zip(lora_counts, lora_counts[1:]))
        adapter_counts = []
        for dim in (8, 16, 32):
            enc = PlainViT(tiny_vit_spec)
            inject(enc, PeftConfig(strategy="adapter", bottleneck_dim=dim))
            adapter_counts.append(count_params(enc)[0])
        assert all(b > a for a, b in zip(adapter_counts, adapter_counts[1:]))


class TestGradients:
    def test_lora_forward_matches_finite_differences(self):
        torch.manual_seed(3)
        base = nn.Linear(4, 4, bias=False).double()
        lora = LoRALinear(base, rank=2, scale=4.0, dropout=0.0).double()
        with torch.no_grad():
            lora.lora_b.weight.normal_()
        x = torch.randn(4, 4, dtype=torch.float64)
        probe = torch.randn(4, 4, dtype=torch.float64)
        params = [lora.lora_a.weight, lora.lora_b.weight]

        def scalar():
            return (lora(x) * probe).sum().item()

        (sum_out := (lora(x) * probe).sum()).backward()
        analytic = [p.grad.clone() for p in params]
        with torch.no_grad():
            numeric = finite_difference_grads(scalar, params)
        for a, n in zip(analytic, numeric):
            assert relative_error(a, n) < 1e-4

    def test_adapter_forward_matches_finite_differences(self):
        torch.manual_seed(4)
        ad = BottleneckAdapter(4, 4).double()
        with torch.no_grad():
            ad.up.weight.normal_(std=0.3)
            ad.up.bias.normal_(std=0.1)
        x = torch.randn(4, 4, dtype=torch.float64)
        probe = torch.randn(4, 4, dtype=torch.float64)
        params = [ad.down.weight, ad.down.bias, ad.up.weight, ad.up.bias]

        def scalar():
            return (ad(x) * probe).sum().item()

        (ad(x) * probe).sum().backward()
        analytic = [p.grad.clone() for p in params]
        with torch.no_grad():
            numeric = finite_difference_grads(scalar, params)
        for a, n in zip(analytic, numeric):
            assert relative_error(a, n) < 1e-4
