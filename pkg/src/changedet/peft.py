"""Parameter-efficient fine-tuning: LoRA and bottleneck adapters.

LoRA wraps the fused qkv projection of every targeted block as one site
(one A, one B with output width 3*dim). Adapters are inserted pre-block on
the residual stream. Injection freezes every base encoder parameter; only
the delta parameters stay trainable. Both deltas start at exact zero
(B = 0, W_up = 0) so the injected model reproduces the frozen baseline
bitwise until the first optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError

STRATEGIES = ("lora", "adapter")


@dataclass
class PeftConfig:
    """Fine-tuning strategy and its hyperparameters.

    ``targets`` selects block indices to adapt (qkv sites for lora, whole
    blocks for adapter); ``None`` means every block.
    """

    strategy: str
    rank: int = 8
    scale: float = 32.0
    dropout: float = 0.1
    bottleneck_dim: int = 32
    targets: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown peft strategy {self.strategy!r}")
        if self.rank <= 0:
            raise ConfigurationError(f"rank must be positive, got {self.rank}")
        if self.scale <= 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.bottleneck_dim <= 0:
            raise ConfigurationError(f"bottleneck_dim must be positive, got {self.bottleneck_dim}")
        if self.targets is not None:
            self.targets = tuple(self.targets)


class LoRALinear(nn.Module):
    """A frozen linear projection plus a trainable low-rank delta.

    forward(x) = W0 x + (scale/rank) * B(A(drop(x))). Dropout acts on the
    delta path only, so the frozen path stays deterministic. A is drawn from
    N(0, 1/rank); B starts at zero, making the delta exactly zero at init.
    """

    def __init__(self, base: nn.Linear, rank: int, scale: float, dropout: float):
        super().__init__()
        d_out, d_in = base.out_features, base.in_features
        if rank >= min(d_out, d_in):
            raise ConfigurationError(
                f"rank {rank} must be < min(out={d_out}, in={d_in})"
            )
        self.base = base
        self.rank = rank
        self.scaling = scale / rank
        self.lora_a = nn.Linear(d_in, rank, bias=False)
        self.lora_b = nn.Linear(rank, d_out, bias=False)
        nn.init.normal_(self.lora_a.weight, std=math.sqrt(1.0 / rank))
        nn.init.zeros_(self.lora_b.weight)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * self.lora_b(self.lora_a(self.drop(x)))

    def merged_weight(self) -> torch.Tensor:
        """W0 + (scale/rank) * B A, the single-matrix equivalent."""
        return self.base.weight + self.scaling * (self.lora_b.weight @ self.lora_a.weight)

    def merged_forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.merged_weight(), self.base.bias)


class BottleneckAdapter(nn.Module):
    """Residual bottleneck MLP: x + W_up GELU(W_down x).

    W_up (weight and bias) starts at zero so the module is the identity at
    init. GELU is the exact erf form.
    """

    def __init__(self, dim: int, bottleneck_dim: int):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck_dim)
        self.act = nn.GELU()
        self.up = nn.Linear(bottleneck_dim, dim)
        nn.init.trunc_normal_(self.down.weight, std=0.02)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.up(self.act(self.down(x)))


def _set_submodule(root: nn.Module, path: str, value: nn.Module):
    parts = path.split(".")
    parent = root
    for p in parts[:-1]:
        parent = getattr(parent, p) if not p.isdigit() else parent[int(p)]
    setattr(parent, parts[-1], value)


def inject(encoder: nn.Module, cfg: PeftConfig) -> nn.Module:
    """Add PEFT modules to an encoder in place and freeze its base weights.

    Re-injection raises instead of double-wrapping.
    """
    if getattr(encoder, "peft_injected", False):
        raise ConfigurationError("encoder already has PEFT modules injected")
    blocks = encoder.transformer_blocks()
    if cfg.targets is None:
        targets = list(range(len(blocks)))
    else:
        bad = [t for t in cfg.targets if not 0 <= t < len(blocks)]
        if bad:
            raise ConfigurationError(
                f"target indices {bad} out of range for {len(blocks)} blocks"
            )
        targets = list(cfg.targets)
    if cfg.strategy == "lora":
        sites = encoder.injection_sites()
        for t in targets:
            name, linear = sites[t]
            _set_submodule(encoder, name, LoRALinear(linear, cfg.rank, cfg.scale, cfg.dropout))
    else:
        for t in targets:
            blocks[t].adapter = BottleneckAdapter(blocks[t].dim, cfg.bottleneck_dim)
    encoder.peft_injected = True
    freeze_base(encoder)
    return encoder


def freeze_base(encoder: nn.Module) -> nn.Module:
    """Freeze every encoder parameter except PEFT deltas.

    Safe to call on a non-injected encoder (frozen-encoder baseline) and
    idempotent otherwise.
    """
    for p in encoder.parameters():
        p.requires_grad_(False)
    for m in encoder.modules():
        if isinstance(m, LoRALinear):
            for p in m.lora_a.parameters():
                p.requires_grad_(True)
            for p in m.lora_b.parameters():
                p.requires_grad_(True)
        elif isinstance(m, BottleneckAdapter):
            for p in m.parameters():
                p.requires_grad_(True)
    return encoder


def peft_parameters(encoder: nn.Module):
    """The trainable delta parameters, in module order."""
    for m in encoder.modules():
        if isinstance(m, LoRALinear):
            yield from m.lora_a.parameters()
            yield from m.lora_b.parameters()
        elif isinstance(m, BottleneckAdapter):
            yield from m.parameters()


def base_parameters(encoder: nn.Module):
    """Frozen base parameters (everything that is not a PEFT delta)."""
    delta = {id(p) for p in peft_parameters(encoder)}
    for p in encoder.parameters():
        if id(p) not in delta:
            yield p


def count_params(model: nn.Module) -> tuple[int, int]:
    """(trainable, total) parameter counts."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total


def count_peft_params(encoder: nn.Module) -> int:
    return sum(p.numel() for p in peft_parameters(encoder))


def base_checksum(encoder: nn.Module) -> str:
    """Order-stable digest of the frozen base weights, for audit trails."""
    import hashlib

    h = hashlib.sha256()
    for p in base_parameters(encoder):
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
