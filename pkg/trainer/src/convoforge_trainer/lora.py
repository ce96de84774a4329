"""Low-rank adapter injection for linear layers.

Wraps selected nn.Linear modules as W x + (alpha / r) * B(A(dropout(x)))
with the base weight frozen; only A and B train. A is Kaiming-initialized
and B starts at zero, so the wrapped model computes exactly the base
function at step zero.
"""

from __future__ import annotations

import math

import torch
from torch import nn

DEFAULT_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj")


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.scaling = alpha / rank
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + self.scaling * delta


def apply_lora(
    model: nn.Module,
    rank: int = 64,
    alpha: float = 16.0,
    dropout: float = 0.05,
    targets: tuple[str, ...] = DEFAULT_TARGETS,
) -> int:
    """Freeze the model and wrap every targeted Linear; returns wrap count."""
    for param in model.parameters():
        param.requires_grad_(False)
    wrapped = 0
    for module in list(model.modules()):
        for name, child in list(module.named_children()):
            if name in targets and isinstance(child, nn.Linear):
                setattr(module, name, LoRALinear(child, rank=rank, alpha=alpha, dropout=dropout))
                wrapped += 1
    if wrapped == 0:
        raise ValueError(f"no target modules matched {targets}")
    return wrapped


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]
