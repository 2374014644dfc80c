"""rockseg: segmentation and classification toolkit for micro-CT rock imagery."""

__version__ = "0.1.0"

from .core import (
    CARBONATES_PALETTE,
    ClassPalette,
    EvalReport,
    GraySlice,
    LabelMask,
    confusion_matrix,
    iou,
    report_from_confusion,
    sample_identity_palette,
)

__all__ = [
    "__version__",
    "CARBONATES_PALETTE",
    "ClassPalette",
    "EvalReport",
    "GraySlice",
    "LabelMask",
    "confusion_matrix",
    "iou",
    "report_from_confusion",
    "sample_identity_palette",
]
