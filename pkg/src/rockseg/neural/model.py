"""Segmentation model bundle: optional encoder + head + parameter accounting.

A :class:`SegModel` takes single-channel image batches and produces
full-resolution class logits, handling the encoder-specific plumbing
(channel replication, normalization, token-grid reshaping) internally.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from pathlib import Path

import torch
import torch.nn as nn

from .backbone import IMAGE_MEAN, IMAGE_STD, VisionTransformer

__all__ = [
    "SegModel",
    "count_trainable_parameters",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
]


def count_trainable_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


class SegModel(nn.Module):
    """(encoder-or-none, head, adapter-config) bundle behind one forward().

    ``kind`` selects the plumbing: "raw" feeds images straight to the head
    (UNet baselines), "vit" runs the token backbone and reshapes patch
    tokens to a feature grid, "resnet" runs a convolutional trunk.
    """

    def __init__(
        self,
        head: nn.Module,
        backbone: nn.Module | None = None,
        kind: str = "raw",
        layers_used: tuple[int, ...] = (-1,),
        name: str = "",
        meta: dict | None = None,
    ):
        super().__init__()
        if kind not in ("raw", "vit", "resnet"):
            raise ValueError(f"unknown model kind {kind!r}")
        if kind != "raw" and backbone is None:
            raise ValueError(f"kind {kind!r} needs a backbone")
        self.head = head
        self.backbone = backbone
        self.kind = kind
        self.layers_used = tuple(layers_used)
        self.name = name
        self.meta = dict(meta or {})
        mean = torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGE_STD).view(1, 3, 1, 1)
        self.register_buffer("input_mean", mean, persistent=False)
        self.register_buffer("input_std", std, persistent=False)

    def _normalize(self, images: torch.Tensor) -> torch.Tensor:
        x = images.repeat(1, 3, 1, 1)
        return (x - self.input_mean) / self.input_std

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"expected B x 1 x H x W input, got {tuple(images.shape)}")
        if self.kind == "raw":
            return self.head(images)
        x = self._normalize(images)
        if self.kind == "vit":
            assert isinstance(self.backbone, VisionTransformer)
            h = images.shape[2] // self.backbone.patch_size
            w = images.shape[3] // self.backbone.patch_size
            layers = self.backbone.get_intermediate_layers(x, self.layers_used, norm=True)
            tokens = torch.cat(layers, dim=-1)            # (B, N, D)
            feats = tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)
            return self.head(feats)
        return self.head(self.backbone(x))

    def trainable_parameters(self) -> int:
        return count_trainable_parameters(self)

    def total_parameters(self) -> int:
        return count_parameters(self)

    def backbone_state_hash(self) -> str:
        """Digest of all backbone tensors; unchanged means untouched weights."""
        if self.backbone is None:
            return ""
        digest = hashlib.sha256()
        for key, tensor in sorted(self.backbone.state_dict().items()):
            digest.update(key.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def _git_revision() -> str:
    try:
        return subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
    except Exception:
        return "unknown"


def save_checkpoint(model: SegModel, path, config: dict | None = None) -> None:
    """Self-describing archive: weights plus the JSON config that built them."""
    meta = {
        "name": model.name,
        "kind": model.kind,
        "layers_used": list(model.layers_used),
        "git_revision": _git_revision(),
        **(config or {}),
    }
    json.dumps(meta)  # fail fast on non-serializable config
    torch.save({"state_dict": model.state_dict(), "meta": meta}, Path(path))


def load_checkpoint(model: SegModel, path) -> dict:
    """Load weights saved by :func:`save_checkpoint`; returns the metadata."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    model.load_state_dict(payload["state_dict"])
    return payload["meta"]
