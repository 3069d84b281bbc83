import numpy as np
import pytest
import torch

from changedet.backbones import BackboneSpec, FeatureStack


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_vit_spec():
    return BackboneSpec(kind="plain_vit", embed_dim=64, depth=4, heads=4, patch_size=8)


@pytest.fixture
def toy_vit_spec():
    return BackboneSpec(kind="plain_vit", embed_dim=64, depth=8, heads=4, patch_size=8)


@pytest.fixture
def tiny_hier_spec():
    return BackboneSpec(
        kind="hierarchical", embed_dim=16, depth=4, heads=4, stage_depths=(1, 1, 1, 1)
    )


def random_stack(rng: np.random.Generator, n=4, channels=8, size=6) -> FeatureStack:
    feats = [torch.from_numpy(rng.standard_normal((1, channels, size, size), dtype=np.float32))
             for _ in range(n)]
    return FeatureStack(feats, strides=[8] * n, layer_ids=list(range(n)))


def finite_difference_grads(fn, params, eps=1e-3):
    """Central finite-difference gradient of scalar fn() w.r.t. each tensor in params."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn()
            flat[i] = orig - eps
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom
