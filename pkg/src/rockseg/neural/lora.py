"""Low-rank adapters injected into frozen linear layers.

A wrapped layer computes ``base(x) + (alpha/r) * B A x`` where A and B are
the only trainable tensors (A Kaiming-initialized, B zero, so training
starts from the frozen model's behavior).  Adapters can be merged back into
plain weights for inference.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .quant import QuantizedConv2d, QuantizedLinear

__all__ = [
    "LoraConfig",
    "LoraLinear",
    "LoraConv1x1",
    "apply_lora",
    "merge_lora",
    "lora_added_parameters",
]


@dataclass(frozen=True)
class LoraConfig:
    """Rank, scaling and targeting of the injected adapters.

    ``r=0`` disables injection (the model is only frozen); ``alpha=None``
    defaults to ``r`` so the update scale is 1.  All linear layers are
    targeted, including the attention projections; ``target_conv1x1`` widens
    the predicate to pointwise convolutions (they are per-pixel linear maps),
    which is how convolutional encoders get adapted.
    """

    r: int = 32
    alpha: float | None = None
    dropout: float = 0.0
    target_conv1x1: bool = False

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"rank must be >= 0, got {self.r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def scaling(self) -> float:
        if self.r == 0:
            return 0.0
        return (self.alpha if self.alpha is not None else float(self.r)) / self.r


class LoraLinear(nn.Module):
    """Frozen linear (possibly quantized) plus a trainable low-rank branch."""

    def __init__(self, base: nn.Module, cfg: LoraConfig):
        super().__init__()
        self.base = base
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.r = cfg.r
        self.scaling = cfg.scaling
        self.lora_a = nn.Parameter(torch.empty(cfg.r, self.in_features))
        self.lora_b = nn.Parameter(torch.zeros(self.out_features, cfg.r))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.dropout = nn.Dropout(cfg.dropout) if cfg.dropout > 0 else nn.Identity()
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        update = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + self.scaling * update

    def added_parameters(self) -> int:
        return self.r * (self.in_features + self.out_features)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)


class LoraConv1x1(nn.Module):
    """Frozen 1x1 convolution plus a trainable low-rank branch."""

    def __init__(self, base: nn.Module, cfg: LoraConfig):
        super().__init__()
        if tuple(base.kernel_size) != (1, 1):
            raise ValueError("LoraConv1x1 requires a 1x1 kernel")
        self.base = base
        self.in_channels = base.in_channels
        self.out_channels = base.out_channels
        self.r = cfg.r
        self.scaling = cfg.scaling
        self.lora_a = nn.Parameter(torch.empty(cfg.r, self.in_channels))
        self.lora_b = nn.Parameter(torch.zeros(self.out_channels, cfg.r))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.dropout = nn.Dropout2d(cfg.dropout) if cfg.dropout > 0 else nn.Identity()
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        delta = (self.lora_b @ self.lora_a).view(self.out_channels, self.in_channels, 1, 1)
        update = F.conv2d(self.dropout(x), delta, stride=self.base.stride)
        return self.base(x) + self.scaling * update

    def added_parameters(self) -> int:
        return self.r * (self.in_channels + self.out_channels)


def _is_linear_target(module: nn.Module) -> bool:
    return isinstance(module, (nn.Linear, QuantizedLinear))


def apply_lora(model: nn.Module, cfg: LoraConfig) -> nn.Module:
    """Freeze ``model`` and inject adapters into every targeted layer.

    After this call the only trainable parameters are the adapter matrices;
    ``r=0`` leaves the model frozen with no adapters.  Returns the model,
    modified in place.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    if cfg.r == 0:
        return model
    _inject(model, cfg)
    return model


def _inject(module: nn.Module, cfg: LoraConfig) -> None:
    for name, child in list(module.named_children()):
        if isinstance(child, (LoraLinear, LoraConv1x1)):
            continue
        if _is_linear_target(child):
            if cfg.r > min(child.in_features, child.out_features):
                warnings.warn(
                    f"rank {cfg.r} exceeds min dim of {name} "
                    f"({child.in_features}x{child.out_features}); allowed but wasteful"
                )
            setattr(module, name, LoraLinear(child, cfg))
        elif (
            cfg.target_conv1x1
            and isinstance(child, (nn.Conv2d, QuantizedConv2d))
            and tuple(child.kernel_size) == (1, 1)
            and child.groups == 1
        ):
            setattr(module, name, LoraConv1x1(child, cfg))
        else:
            _inject(child, cfg)


def lora_added_parameters(model: nn.Module) -> int:
    """Total adapter parameters, r * (d_in + d_out) per adapted layer."""
    return sum(
        m.added_parameters()
        for m in model.modules()
        if isinstance(m, (LoraLinear, LoraConv1x1))
    )


def merge_lora(model: nn.Module) -> nn.Module:
    """Deep copy of ``model`` with every adapter folded into a plain layer."""
    merged = copy.deepcopy(model)
    _merge_into(merged)
    return merged


def _merge_into(module: nn.Module) -> None:
    for name, child in list(module.named_children()):
        if isinstance(child, LoraLinear):
            has_bias = getattr(child.base, "bias", None) is not None
            merged_w = child.merged_weight()
            lin = nn.Linear(child.in_features, child.out_features, bias=has_bias)
            lin = lin.to(merged_w.dtype)
            with torch.no_grad():
                lin.weight.copy_(merged_w)
                if has_bias:
                    lin.bias.copy_(child.base.bias)
            setattr(module, name, lin)
        elif isinstance(child, LoraConv1x1):
            base = child.base
            has_bias = base.bias is not None
            conv = nn.Conv2d(
                child.in_channels, child.out_channels, 1,
                stride=base.stride, bias=has_bias,
            )
            delta = (child.lora_b @ child.lora_a).view(
                child.out_channels, child.in_channels, 1, 1
            )
            with torch.no_grad():
                conv.weight.copy_(base.weight + child.scaling * delta)
                if has_bias:
                    conv.bias.copy_(base.bias)
            setattr(module, name, conv)
        else:
            _merge_into(child)
