"""Fine-tuning loop for segmentation models.

Training consumes (slice, mask) pairs, applies the augmentation pipeline
with per-slice seeded generators, and tracks held-out IoU per epoch; the
best-IoU weights are restored at the end.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..core import (
    ClassPalette, EvalReport, GraySlice, LabelMask,
    confusion_matrix, report_from_confusion,
)
from ..preprocess import AugmentConfig, augment, slice_rng
from .model import SegModel

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "train_segmenter",
    "predict_mask",
    "evaluate_segmenter",
]


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 15
    n_train_images: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.0
    class_weighted_loss: bool = False
    seed: int = 0
    device: str = "cpu"
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _class_weights(masks: list[LabelMask]) -> torch.Tensor:
    n = len(masks[0].palette)
    counts = np.zeros(n, dtype=np.float64)
    for m in masks:
        counts += np.bincount(m.labels.ravel(), minlength=n)
    freq = counts / counts.sum()
    weights = 1.0 / np.maximum(freq, 1e-8)
    return torch.tensor(weights / weights.mean(), dtype=torch.float32)


def _to_image_batch(slices: list[GraySlice], device: str) -> torch.Tensor:
    return torch.stack([
        torch.from_numpy(np.ascontiguousarray(s.pixels, dtype=np.float32))[None]
        for s in slices
    ]).to(device)


def _to_batch(pairs: list[tuple[GraySlice, LabelMask]], device: str):
    images = _to_image_batch([s for s, _ in pairs], device)
    labels = torch.stack([
        torch.from_numpy(np.ascontiguousarray(m.labels)) for _, m in pairs
    ]).long().to(device)
    return images, labels


def train_segmenter(
    model: SegModel,
    train_pairs: list[tuple[GraySlice, LabelMask]],
    val_pairs: list[tuple[GraySlice, LabelMask]],
    cfg: TrainConfig,
) -> tuple[SegModel, list[dict]]:
    """Optimize the model's trainable parameters with pixelwise cross-entropy.

    Returns the model carrying its best-validation-IoU weights and a history
    of per-epoch train loss and held-out mean IoU.  Runs are repeatable for a
    fixed seed on fixed hardware.
    """
    if not train_pairs:
        raise ValueError("empty training set")
    palette = train_pairs[0][1].palette
    device = cfg.device
    model = model.to(device)
    torch.manual_seed(cfg.seed)

    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.AdamW(trainable, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, cfg.epochs * steps_per_epoch)
    )
    weights = _class_weights([m for _, m in train_pairs]) if cfg.class_weighted_loss else None
    criterion = nn.CrossEntropyLoss(
        weight=weights.to(device) if weights is not None else None
    )

    order_rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
    history: list[dict] = []
    best_miou, best_state = -1.0, None

    backbone_frozen = model.backbone is not None and not any(
        p.requires_grad for p in model.backbone.parameters()
    )
    for epoch in range(cfg.epochs):
        model.train()
        if backbone_frozen:  # keep dropout/norm statistics inert
            model.backbone.eval()
        order = order_rng.permutation(len(train_pairs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            batch = []
            for i in batch_idx:
                slc, mask = train_pairs[i]
                rng = slice_rng(cfg.seed, slc.sample_id, slc.slice_index, epoch)
                batch.append(augment(slc, mask, cfg.augment, rng=rng))
            images, labels = _to_batch(batch, device)
            optimizer.zero_grad()
            logits = model(images)
            loss = criterion(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {start // cfg.batch_size} "
                    f"(lr={scheduler.get_last_lr()[0]:.3g}, "
                    f"recent losses={losses[-3:]})"
                )
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(float(loss.detach()))

        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_pairs:
            report = evaluate_segmenter(model, val_pairs, palette, cfg)
            entry["val_miou"] = report.mean_iou
            if report.mean_iou > best_miou:
                best_miou = report.mean_iou
                best_state = copy.deepcopy(model.state_dict())
        history.append(entry)

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


def predict_mask(
    model: SegModel,
    slc: GraySlice,
    palette: ClassPalette,
    cfg: TrainConfig,
) -> LabelMask:
    """Deterministic center-crop + upsample pipeline, then argmax logits."""
    eval_aug = cfg.augment.deterministic_variant()
    prepared, _ = augment(slc, None, eval_aug)
    model.eval()
    with torch.no_grad():
        logits = model(_to_image_batch([prepared], cfg.device))
        pred = logits.argmax(dim=1)[0].cpu().numpy()
    return LabelMask(pred.astype(np.int64), palette)


def evaluate_segmenter(
    model: SegModel,
    pairs: list[tuple[GraySlice, LabelMask]],
    palette: ClassPalette,
    cfg: TrainConfig,
) -> EvalReport:
    """Dataset-level IoU: confusions accumulate over the evaluated slices."""
    eval_aug = cfg.augment.deterministic_variant()
    total = np.zeros((len(palette), len(palette)), dtype=np.int64)
    model.eval()
    for slc, mask in pairs:
        prepared_slc, prepared_mask = augment(slc, mask, eval_aug)
        with torch.no_grad():
            logits = model(_to_image_batch([prepared_slc], cfg.device))
            pred = logits.argmax(dim=1)[0].cpu().numpy().astype(np.int64)
        total += confusion_matrix(LabelMask(pred, palette), prepared_mask)
    return report_from_confusion(total, palette.names, seed=cfg.seed)
