"""Segmentation heads decoding patch features into full-resolution logits.

The linear head is a per-pixel affine map (1x1 convolution) followed by
bilinear upsampling; the convolutional head compresses to 512 channels and
decodes through four progressively upsampled 3x3 stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..preprocess import FeatureMap

__all__ = ["HeadSpec", "LinearHead", "ConvHead", "build_head", "head_forward"]

# decoder stage output sizes for the standard 560-pixel working resolution
_STAGE_SIZES_560 = (80, 160, 320, 560)


@dataclass(frozen=True)
class HeadSpec:
    kind: str                 # "linear" or "conv"
    in_dim: int
    n_classes: int
    output_size: int = 560
    dropout: float = 0.1
    conv_channels: tuple[int, ...] = (512, 256, 128, 64)
    stage_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "conv"):
            raise ValueError(f"kind must be 'linear' or 'conv', got {self.kind!r}")
        if self.in_dim < 1 or self.n_classes < 2:
            raise ValueError("need in_dim >= 1 and n_classes >= 2")
        if self.stage_sizes is not None:
            object.__setattr__(self, "stage_sizes", tuple(self.stage_sizes))

    def resolved_stage_sizes(self) -> tuple[int, ...]:
        if self.stage_sizes is not None:
            return self.stage_sizes
        if self.output_size == 560:
            return _STAGE_SIZES_560
        # generic fallback: four halvings ending at the output size
        return tuple(
            max(1, round(self.output_size / 2**p)) for p in (3, 2, 1, 0)
        )


class LinearHead(nn.Module):
    """1x1 projection over patch features, bilinearly upsampled to full size."""

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.proj = nn.Conv2d(spec.in_dim, spec.n_classes, kernel_size=1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        logits = self.proj(feats)
        size = (self.spec.output_size, self.spec.output_size)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


class ConvHead(nn.Module):
    """Four-stage upsampling decoder with LeakyReLU and periodic dropout.

    Stage sizes default to 80 -> 160 -> 320 -> 560 at the working resolution;
    every convolution is 3x3 with same padding, and dropout follows every
    second convolution.
    """

    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        self.sizes = spec.resolved_stage_sizes()
        ch = spec.conv_channels
        self.stem = nn.Conv2d(spec.in_dim, ch[0], 3, padding=1)
        ins = ch
        outs = ch[1:] + (ch[-1],)
        self.stages = nn.ModuleList(
            nn.Conv2d(i, o, 3, padding=1) for i, o in zip(ins, outs)
        )
        self.drop = nn.Dropout2d(spec.dropout)
        self.act = nn.LeakyReLU(0.01, inplace=True)
        self.final = nn.Conv2d(outs[-1], spec.n_classes, 3, padding=1)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = self.act(self.stem(feats))
        for i, (conv, size) in enumerate(zip(self.stages, self.sizes)):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
            x = self.act(conv(x))
            if i % 2 == 0:  # dropout after every second convolution overall
                x = self.drop(x)
        return self.final(x)


def build_head(spec: HeadSpec) -> nn.Module:
    return LinearHead(spec) if spec.kind == "linear" else ConvHead(spec)


def head_forward(head: nn.Module, features: FeatureMap) -> np.ndarray:
    """Decode one feature map into an S x S x n_classes logit array."""
    in_dim = head.spec.in_dim
    if features.k != in_dim:
        raise ValueError(
            f"feature channels {features.k} do not match head input {in_dim}"
        )
    head.eval()
    with torch.no_grad():
        x = torch.from_numpy(
            np.ascontiguousarray(features.values, dtype=np.float32)
        ).permute(2, 0, 1)[None]
        logits = head(x)[0].permute(1, 2, 0)
    return logits.numpy()
