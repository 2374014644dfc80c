"""Blockwise affine weight quantization for frozen backbones.

Weights are flattened, cut into fixed-size blocks, and stored as packed
4-bit codes with one (scale, min) pair per block.  Adapters and heads stay
full precision; quantization is lossy by design and its error is reported,
never raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "QuantConfig",
    "quantize_blockwise",
    "dequantize_blockwise",
    "QuantizedLinear",
    "QuantizedConv2d",
    "quantize",
    "quantization_error_report",
    "stored_bits_per_weight",
]


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    scheme: str = "blockwise-affine"
    block_size: int = 64
    enabled: bool = True

    def __post_init__(self):
        if self.bits != 4:
            raise ValueError(f"only 4-bit quantization is supported, got {self.bits}")
        if self.scheme != "blockwise-affine":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def quantize_blockwise(weight: torch.Tensor, block_size: int = 64) -> dict:
    """Quantize a tensor to packed 4-bit codes with per-block affine grids.

    Each block stores ``scale = (max - min) / 15`` and ``min``; codes are
    ``round((w - min) / scale)`` in 0..15, two codes per byte.  A constant
    block gets scale 0 and round-trips exactly.
    """
    if not torch.isfinite(weight).all():
        raise ValueError("weights must be finite")
    flat = weight.detach().to(torch.float32).reshape(-1)
    n = flat.numel()
    n_blocks = (n + block_size - 1) // block_size
    padded = F.pad(flat, (0, n_blocks * block_size - n))
    blocks = padded.reshape(n_blocks, block_size)

    mins = blocks.min(dim=1).values
    maxs = blocks.max(dim=1).values
    scales = (maxs - mins) / 15.0
    safe = torch.where(scales > 0, scales, torch.ones_like(scales))
    codes = torch.round((blocks - mins[:, None]) / safe[:, None])
    codes = torch.where(
        (scales > 0)[:, None], codes, torch.zeros_like(codes)
    ).clamp_(0, 15).to(torch.uint8)

    codes = codes.reshape(-1)
    if codes.numel() % 2:  # odd block sizes leave a dangling nibble
        codes = F.pad(codes, (0, 1))
    packed = (codes[0::2] | (codes[1::2] << 4)).contiguous()
    return {
        "packed": packed,
        "scales": scales,
        "mins": mins,
        "numel": n,
        "block_size": block_size,
        "shape": tuple(weight.shape),
    }


def dequantize_blockwise(q: dict) -> torch.Tensor:
    packed = q["packed"]
    codes = torch.empty(packed.numel() * 2, dtype=torch.uint8, device=packed.device)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    codes = codes[: q["scales"].numel() * q["block_size"]]
    blocks = codes.reshape(-1, q["block_size"]).to(torch.float32)
    flat = blocks * q["scales"][:, None] + q["mins"][:, None]
    return flat.reshape(-1)[: q["numel"]].reshape(q["shape"])


class _QuantizedWeightMixin:
    def _register_quantized(self, weight: torch.Tensor, block_size: int) -> None:
        q = quantize_blockwise(weight, block_size)
        self.register_buffer("qweight", q["packed"])
        self.register_buffer("scales", q["scales"])
        self.register_buffer("mins", q["mins"])
        self.weight_numel = q["numel"]
        self.block_size = block_size
        self.weight_shape = q["shape"]

    @property
    def weight(self) -> torch.Tensor:
        """Dequantized weight, materialized on the fly."""
        return dequantize_blockwise({
            "packed": self.qweight, "scales": self.scales, "mins": self.mins,
            "numel": self.weight_numel, "block_size": self.block_size,
            "shape": self.weight_shape,
        })


class QuantizedLinear(nn.Module, _QuantizedWeightMixin):
    """Drop-in linear layer whose weight lives as packed 4-bit codes."""

    def __init__(self, linear: nn.Linear, cfg: QuantConfig):
        super().__init__()
        self.in_features = linear.in_features
        self.out_features = linear.out_features
        self._register_quantized(linear.weight, cfg.block_size)
        if linear.bias is not None:
            self.register_buffer("bias", linear.bias.detach().clone())
        else:
            self.bias = None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def extra_repr(self):
        return f"in_features={self.in_features}, out_features={self.out_features}, bits=4"


class QuantizedConv2d(nn.Module, _QuantizedWeightMixin):
    """Conv2d with 4-bit packed weights (stride/padding preserved)."""

    def __init__(self, conv: nn.Conv2d, cfg: QuantConfig):
        super().__init__()
        self.in_channels = conv.in_channels
        self.out_channels = conv.out_channels
        self.kernel_size = tuple(conv.kernel_size)
        self.stride = conv.stride
        self.padding = conv.padding
        self.dilation = conv.dilation
        self.groups = conv.groups
        self._register_quantized(conv.weight, cfg.block_size)
        if conv.bias is not None:
            self.register_buffer("bias", conv.bias.detach().clone())
        else:
            self.bias = None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride,
                        self.padding, self.dilation, self.groups)


def quantize(model: nn.Module, cfg: QuantConfig = QuantConfig()) -> nn.Module:
    """Replace every linear/conv weight in ``model`` with 4-bit packed codes.

    Intended for frozen backbones: all remaining parameters are frozen too.
    Returns the model (modified in place); a disabled config is a no-op.
    """
    if not cfg.enabled:
        return model
    for p in model.parameters():
        p.requires_grad_(False)
    _replace_quantized(model, cfg)
    return model


def _replace_quantized(module: nn.Module, cfg: QuantConfig) -> None:
    for name, child in list(module.named_children()):
        if isinstance(child, nn.Linear):
            setattr(module, name, QuantizedLinear(child, cfg))
        elif isinstance(child, nn.Conv2d):
            setattr(module, name, QuantizedConv2d(child, cfg))
        else:
            _replace_quantized(child, cfg)


def quantization_error_report(
    full: nn.Module, quantized: nn.Module, sample_input: torch.Tensor
) -> dict:
    """Measured forward-output deviation introduced by quantization."""
    full.eval()
    quantized.eval()
    with torch.no_grad():
        a = full(sample_input)
        b = quantized(sample_input)
    diff = (a - b).abs()
    return {
        "max_abs_diff": float(diff.max()),
        "mean_abs_diff": float(diff.mean()),
    }


def stored_bits_per_weight(module) -> float:
    """Bits per weight value of the packed representation (codes only)."""
    return module.qweight.numel() * 8.0 / module.weight_numel
