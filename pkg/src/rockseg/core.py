"""Shared domain types and evaluation metrics.

Every segmentation method in this package reports through :func:`iou` and
:func:`confusion_matrix`, so the conventions fixed here (integer class
encoding via :class:`ClassPalette`, macro-averaged IoU) are the single
source of truth for all benchmarks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ClassPalette",
    "GraySlice",
    "LabelMask",
    "EvalReport",
    "CARBONATES_PALETTE",
    "sample_identity_palette",
    "confusion_matrix",
    "iou",
    "report_from_confusion",
]

# tab10-style cycle used when a palette is generated from sample ids
_AUTO_COLORS = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
)


@dataclass(frozen=True)
class ClassPalette:
    """Ordered class labels with display colors.

    The position of a name in ``names`` is its canonical integer encoding;
    every :class:`LabelMask` uses this encoding.
    """

    names: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        names = tuple(self.names)
        colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "colors", colors)
        if len(names) < 2:
            raise ValueError("a palette needs at least 2 classes")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique, got {names}")
        if len(colors) != len(names):
            raise ValueError("need one color per class")
        for c in colors:
            if len(c) != 3 or any(v < 0 or v > 255 for v in c):
                raise ValueError(f"colors must be RGB triples in 0..255, got {c}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


#: Three-phase palette of the carbonate core samples.
CARBONATES_PALETTE = ClassPalette(
    names=("crude_oil", "brine", "rock_matrix"),
    colors=((120, 40, 31), (46, 134, 193), (160, 160, 160)),
)


def sample_identity_palette(sample_ids) -> ClassPalette:
    """Palette where each class is one sample identity (classification task)."""
    ids = tuple(str(s) for s in sample_ids)
    colors = tuple(_AUTO_COLORS[i % len(_AUTO_COLORS)] for i in range(len(ids)))
    return ClassPalette(names=ids, colors=colors)


@dataclass(frozen=True)
class GraySlice:
    """A single 2D grayscale slice with provenance.

    ``pixels`` holds intensities normalized to [0, 1]; raw integer data only
    exists inside the ingest step.
    """

    pixels: np.ndarray
    sample_id: str
    slice_index: int

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2D array, got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            raise ValueError(f"pixels must be floating point, got dtype {px.dtype}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels contain non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(
                f"pixels must lie in [0, 1], got range [{px.min():.4g}, {px.max():.4g}]"
            )
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class indices tied to a fixed palette."""

    labels: np.ndarray
    palette: ClassPalette

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.size == 0:
            raise ValueError(f"labels must be a non-empty 2D array, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            lab = lab.astype(np.int64)
            if not np.array_equal(lab, np.asarray(self.labels)):
                raise ValueError("labels must be integral")
        if lab.min() < 0 or lab.max() >= len(self.palette):
            raise ValueError(
                f"labels must lie in [0, {len(self.palette) - 1}], "
                f"got range [{lab.min()}, {lab.max()}]"
            )
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class EvalReport:
    """Per-class IoU, mean IoU and confusion counts for one evaluation run.

    ``per_class_iou`` only contains classes that appear in the prediction or
    the ground truth; ``mean_iou`` is the unweighted mean over those classes.
    """

    per_class_iou: dict[str, float]
    mean_iou: float
    confusion: np.ndarray
    class_names: tuple[str, ...]
    n_train_images: int = 0
    method_name: str = ""
    seed: int = 0

    def __post_init__(self):
        conf = np.asarray(self.confusion, dtype=np.int64)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValueError("confusion must be square")
        if conf.min() < 0:
            raise ValueError("confusion entries must be >= 0")
        if conf.shape[0] != len(self.class_names):
            raise ValueError("confusion size must match class_names")
        self.confusion = conf
        self.class_names = tuple(self.class_names)

    def to_json(self) -> str:
        payload = {
            "method_name": self.method_name,
            "n_train_images": self.n_train_images,
            "seed": self.seed,
            "mean_iou": self.mean_iou,
            "per_class_iou": self.per_class_iou,
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            per_class_iou={k: float(v) for k, v in d["per_class_iou"].items()},
            mean_iou=float(d["mean_iou"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            class_names=tuple(d["class_names"]),
            n_train_images=int(d["n_train_images"]),
            method_name=str(d["method_name"]),
            seed=int(d["seed"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())

    def csv_header(self) -> list[str]:
        return (
            ["method_name", "n_train_images", "seed", "mean_iou"]
            + [f"iou_{n}" for n in self.class_names]
        )

    def to_csv_row(self) -> list:
        return (
            [self.method_name, self.n_train_images, self.seed, self.mean_iou]
            + [self.per_class_iou.get(n, "") for n in self.class_names]
        )


def _check_pair(pred: LabelMask, gt: LabelMask) -> None:
    if pred.labels.size == 0 or gt.labels.size == 0:
        raise ValueError("masks must be non-empty")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.palette.names != gt.palette.names:
        raise ValueError(
            f"palette mismatch: {pred.palette.names} vs {gt.palette.names}"
        )


def confusion_matrix(pred: LabelMask, gt: LabelMask) -> np.ndarray:
    """Count matrix where entry (i, j) is the number of pixels with
    ground-truth class i predicted as class j."""
    _check_pair(pred, gt)
    n = len(gt.palette)
    joint = gt.labels.astype(np.int64).ravel() * n + pred.labels.astype(np.int64).ravel()
    return np.bincount(joint, minlength=n * n).reshape(n, n)


def report_from_confusion(
    confusion: np.ndarray,
    class_names: tuple[str, ...],
    *,
    method_name: str = "",
    n_train_images: int = 0,
    seed: int = 0,
) -> EvalReport:
    """Derive per-class and mean IoU from a (possibly accumulated) confusion.

    IoU per class is TP / (TP + FP + FN).  Classes absent from both the
    prediction and the ground truth carry no signal and are excluded from
    the mean; classes present in only one of the two score 0 and count.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    if not present.any():
        raise ValueError("no class present in either mask")

    per_class = {
        class_names[c]: float(tp[c] / union[c]) for c in np.flatnonzero(present)
    }
    mean = float(np.mean([per_class[class_names[c]] for c in np.flatnonzero(present)]))
    return EvalReport(
        per_class_iou=per_class,
        mean_iou=mean,
        confusion=conf,
        class_names=tuple(class_names),
        n_train_images=n_train_images,
        method_name=method_name,
        seed=seed,
    )


def iou(
    pred: LabelMask,
    gt: LabelMask,
    *,
    method_name: str = "",
    n_train_images: int = 0,
    seed: int = 0,
) -> EvalReport:
    """Per-class intersection-over-union and its unweighted mean."""
    conf = confusion_matrix(pred, gt)
    return report_from_confusion(
        conf, gt.palette.names,
        method_name=method_name, n_train_images=n_train_images, seed=seed,
    )
