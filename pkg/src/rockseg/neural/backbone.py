"""Vision-transformer backbone: architecture, checkpoint loading, features.

The architecture mirrors the published DINOv2 ViT family (patch 14, class
token, pre-norm blocks with layer scale) so official checkpoints load by
state-dict name; randomly initialized instances double as stub backbones in
tests.  Checkpoints are data, referenced by path and never bundled.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import GraySlice
from ..preprocess import FeatureMap

__all__ = [
    "BackboneSpec",
    "BackboneError",
    "VisionTransformer",
    "build_backbone",
    "build_stub_backbone",
    "extract_features",
    "extract_cls_embedding",
    "checkpoint_dir",
    "IMAGE_MEAN",
    "IMAGE_STD",
]

# normalization published with the backbone checkpoints
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

CACHE_ENV_VAR = "ROCKSEG_CHECKPOINT_DIR"

_SIZES = {
    "small": dict(embed_dim=384, depth=12, num_heads=6),
    "base": dict(embed_dim=768, depth=12, num_heads=12),
    "large": dict(embed_dim=1024, depth=24, num_heads=16),
}

_CHECKPOINT_HINTS = {
    "small": "https://dl.fbaipublicfiles.com/dinov2/dinov2_vits14/dinov2_vits14_pretrain.pth",
    "base": "https://dl.fbaipublicfiles.com/dinov2/dinov2_vitb14/dinov2_vitb14_pretrain.pth",
    "large": "https://dl.fbaipublicfiles.com/dinov2/dinov2_vitl14/dinov2_vitl14_pretrain.pth",
}


class BackboneError(RuntimeError):
    """Raised when a backbone cannot be built or its checkpoint is missing."""


def checkpoint_dir() -> Path:
    """Cache directory for backbone checkpoints (overridable by env var)."""
    return Path(os.environ.get(CACHE_ENV_VAR, Path.home() / ".cache" / "rockseg"))


@dataclass(frozen=True)
class BackboneSpec:
    """Size, patch geometry and which layers feed the feature concat."""

    size: str = "base"
    patch: int = 14
    layers_used: tuple[int, ...] = (-1,)

    def __post_init__(self):
        if self.size not in _SIZES:
            raise ValueError(f"size must be one of {tuple(_SIZES)}, got {self.size!r}")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        object.__setattr__(self, "layers_used", tuple(int(i) for i in self.layers_used))
        if not self.layers_used:
            raise ValueError("layers_used must not be empty")

    @property
    def feature_dim(self) -> int:
        return _SIZES[self.size]["embed_dim"]

    @property
    def n_layers(self) -> int:
        return _SIZES[self.size]["depth"]

    @property
    def concat_dim(self) -> int:
        return len(self.layers_used) * self.feature_dim

    def token_grid(self, image_size: int) -> tuple[int, int]:
        if image_size % self.patch != 0:
            raise ValueError(f"image size {image_size} not divisible by patch {self.patch}")
        return (image_size // self.patch, image_size // self.patch)

    def checkpoint_hint(self) -> str:
        return _CHECKPOINT_HINTS[self.size]


class _Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class _LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(init * torch.ones(dim))

    def forward(self, x):
        return x * self.gamma


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = _Attention(dim, num_heads)
        self.ls1 = _LayerScale(dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = _Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = _LayerScale(dim)

    def forward(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x


class _PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, in_chans: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        x = self.proj(x)                       # (B, D, h, w)
        return x.flatten(2).transpose(1, 2)    # (B, h*w, D)


class VisionTransformer(nn.Module):
    """Plain pre-norm ViT with class token and interpolated position codes."""

    def __init__(
        self,
        embed_dim: int = 768,
        depth: int = 12,
        num_heads: int = 12,
        patch_size: int = 14,
        pos_grid: int = 37,
        in_chans: int = 3,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.pos_grid = pos_grid
        self.patch_embed = _PatchEmbed(patch_size, in_chans, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, pos_grid * pos_grid + 1, embed_dim))
        self.mask_token = nn.Parameter(torch.zeros(1, embed_dim))  # checkpoint compat
        self.blocks = nn.ModuleList(
            _Block(embed_dim, num_heads) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def _pos_encoding(self, grid_h: int, grid_w: int) -> torch.Tensor:
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        if (grid_h, grid_w) == (self.pos_grid, self.pos_grid):
            return torch.cat([cls_pos, patch_pos], dim=1)
        patch_pos = patch_pos.reshape(1, self.pos_grid, self.pos_grid, self.embed_dim)
        patch_pos = patch_pos.permute(0, 3, 1, 2)
        patch_pos = F.interpolate(
            patch_pos, size=(grid_h, grid_w), mode="bicubic", align_corners=False
        )
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, self.embed_dim)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def _prepare_tokens(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"input {h}x{w} not divisible by patch size {self.patch_size}"
            )
        tokens = self.patch_embed(x)
        cls = self.cls_token.expand(b, -1, -1)
        tokens = torch.cat([cls, tokens], dim=1)
        return tokens + self._pos_encoding(h // self.patch_size, w // self.patch_size)

    def get_intermediate_layers(
        self, x: torch.Tensor, indices: tuple[int, ...], norm: bool = True
    ) -> list[torch.Tensor]:
        """Patch tokens (class token dropped) of the requested blocks."""
        wanted = {i % self.depth for i in indices}
        tokens = self._prepare_tokens(x)
        collected: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in wanted:
                collected[i] = tokens
        out = []
        for i in indices:
            t = collected[i % self.depth]
            if norm:
                t = self.norm(t)
            out.append(t[:, 1:])
        return out

    def forward_features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        tokens = self._prepare_tokens(x)
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        return {"cls": tokens[:, 0], "patch": tokens[:, 1:]}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)["patch"]


def default_checkpoint_path(spec: BackboneSpec) -> Path:
    return checkpoint_dir() / f"dinov2_vit{spec.size[0]}14_pretrain.pth"


def build_backbone(
    spec: BackboneSpec,
    checkpoint: str | Path | None = None,
    seed: int = 0,
    expected_sha256: str | None = None,
) -> VisionTransformer:
    """Instantiate the ViT for ``spec``, optionally loading published weights.

    Without a checkpoint the model is randomly initialized from ``seed``
    (useful as a stub); with one, the state dict must match the architecture,
    and ``expected_sha256`` (when configured) must match the file digest.
    """
    torch.manual_seed(seed)
    model = VisionTransformer(patch_size=spec.patch, **_SIZES[spec.size])
    if checkpoint is not None:
        path = Path(checkpoint)
        if not path.exists():
            raise BackboneError(
                f"checkpoint not found: {path}. Download the published weights, e.g.\n"
                f"  curl -L -o {path} {spec.checkpoint_hint()}\n"
                f"(cache dir configurable via ${CACHE_ENV_VAR})"
            )
        if expected_sha256 is not None:
            import hashlib

            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != expected_sha256.lower():
                raise BackboneError(
                    f"checkpoint digest mismatch for {path}: "
                    f"got {digest}, expected {expected_sha256}"
                )
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state, strict=True)
    return model.eval()


def build_stub_backbone(
    embed_dim: int = 384, depth: int = 2, num_heads: int | None = None,
    seed: int = 0,
) -> VisionTransformer:
    """Small random ViT for tests: real token geometry, throwaway weights."""
    if num_heads is None:
        num_heads = next(h for h in (8, 6, 4, 2, 1) if embed_dim % h == 0)
    torch.manual_seed(seed)
    return VisionTransformer(embed_dim=embed_dim, depth=depth, num_heads=num_heads).eval()


def _to_backbone_input(slc: GraySlice, device: str) -> torch.Tensor:
    """Replicate grayscale to 3 channels and apply the published normalization."""
    x = torch.from_numpy(np.ascontiguousarray(slc.pixels, dtype=np.float32))
    x = x[None, None].repeat(1, 3, 1, 1)
    mean = torch.tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(IMAGE_STD).view(1, 3, 1, 1)
    return ((x - mean) / std).to(device)


def extract_features(
    model: VisionTransformer,
    slc: GraySlice,
    layers_used: tuple[int, ...] = (-1,),
    device: str = "cpu",
    extractor_tag: str = "vit",
) -> FeatureMap:
    """Concatenated patch-token features of one slice as an H/p x W/p map."""
    h, w = slc.shape
    p = model.patch_size
    if h % p or w % p:
        raise ValueError(f"input {h}x{w} not divisible by patch size {p}")
    model.eval()
    with torch.no_grad():
        x = _to_backbone_input(slc, device)
        layers = model.get_intermediate_layers(x, tuple(layers_used), norm=True)
        tokens = torch.cat(layers, dim=-1)[0]          # (N, D_cat)
    grid = (h // p, w // p)
    values = tokens.reshape(grid[0], grid[1], -1).cpu().numpy()
    return FeatureMap(values.astype(np.float32), extractor=extractor_tag,
                      source=slc.sample_id)


def extract_cls_embedding(
    model: VisionTransformer, slc: GraySlice, device: str = "cpu"
) -> np.ndarray:
    """Global class-token embedding of one slice (image classification)."""
    model.eval()
    with torch.no_grad():
        x = _to_backbone_input(slc, device)
        return model.forward_features(x)["cls"][0].cpu().numpy()
