"""Baseline networks: UNet (small/large) and a ResNet152 encoder + ConvHead."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet152

from .heads import ConvHead, HeadSpec
from .lora import LoraConfig, apply_lora
from .model import SegModel
from .quant import QuantConfig, quantize

__all__ = ["UNet", "build_baseline", "BASELINE_KINDS"]

BASELINE_KINDS = ("unet_small", "unet_large", "resnet152_convhead")


class _DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    """Classic encoder/decoder UNet; ``base_channels`` 32 gives the small
    variant (~7.8M parameters), 64 the large one (~31M)."""

    def __init__(self, in_channels: int = 1, n_classes: int = 3, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.inc = _DoubleConv(in_channels, c)
        self.downs = nn.ModuleList([
            _DoubleConv(c, 2 * c),
            _DoubleConv(2 * c, 4 * c),
            _DoubleConv(4 * c, 8 * c),
            _DoubleConv(8 * c, 16 * c),
        ])
        self.pool = nn.MaxPool2d(2)
        self.up_convs = nn.ModuleList([
            nn.ConvTranspose2d(16 * c, 8 * c, 2, stride=2),
            nn.ConvTranspose2d(8 * c, 4 * c, 2, stride=2),
            nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2),
            nn.ConvTranspose2d(2 * c, c, 2, stride=2),
        ])
        self.up_blocks = nn.ModuleList([
            _DoubleConv(16 * c, 8 * c),
            _DoubleConv(8 * c, 4 * c),
            _DoubleConv(4 * c, 2 * c),
            _DoubleConv(2 * c, c),
        ])
        self.outc = nn.Conv2d(c, n_classes, 1)

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(self.pool(skips[-1])))
        x = skips.pop()
        for up, block in zip(self.up_convs, self.up_blocks):
            x = up(x)
            skip = skips.pop()
            if x.shape[-2:] != skip.shape[-2:]:  # odd sizes under pooling
                x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear",
                                  align_corners=False)
            x = block(torch.cat([skip, x], dim=1))
        return self.outc(x)


def _resnet152_trunk(checkpoint: str | Path | None) -> nn.Module:
    net = resnet152(weights=None)
    if checkpoint is not None:
        state = torch.load(Path(checkpoint), map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )


def build_baseline(
    kind: str,
    n_classes: int = 3,
    seed: int = 0,
    quant: QuantConfig | None = None,
    lora: LoraConfig | None = None,
    checkpoint: str | Path | None = None,
) -> SegModel:
    """Construct one of the benchmark baselines with seeded initialization.

    ``resnet152_convhead`` optionally quantizes the frozen trunk and injects
    adapters (pointwise convolutions included) before attaching the ConvHead;
    the UNets train from scratch and ignore ``quant``/``lora``.
    """
    torch.manual_seed(seed)
    if kind == "unet_small":
        return SegModel(
            head=UNet(1, n_classes, base_channels=32), kind="raw", name=kind
        )
    if kind == "unet_large":
        return SegModel(
            head=UNet(1, n_classes, base_channels=64), kind="raw", name=kind
        )
    if kind == "resnet152_convhead":
        trunk = _resnet152_trunk(checkpoint)
        if quant is not None:
            trunk = quantize(trunk, quant)
        if lora is not None:
            lora = LoraConfig(r=lora.r, alpha=lora.alpha, dropout=lora.dropout,
                              target_conv1x1=True)
            trunk = apply_lora(trunk, lora)
        else:
            for p in trunk.parameters():
                p.requires_grad_(False)
        head = ConvHead(HeadSpec(kind="conv", in_dim=2048, n_classes=n_classes))
        return SegModel(head=head, backbone=trunk, kind="resnet", name=kind)
    raise ValueError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")
