"""Embedding analysis and figure emission.

t-SNE scatter/barycenter plots for image embeddings, PCA-as-RGB views of
dense feature maps, confusion-matrix heatmaps and mask galleries.  Figures
are static artifacts written as PNG plus vector PDF; coordinates are also
dumped to CSV for external replotting.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from sklearn.manifold import TSNE

from .core import ClassPalette, EvalReport, LabelMask

__all__ = [
    "EmbeddingSet",
    "PcaView",
    "tsne_embed",
    "pca_rgb",
    "render_confusion",
    "mask_gallery",
    "plot_embedding_scatter",
    "plot_embedding_barycenters",
    "barycenter_representatives",
    "save_figure",
    "coords_to_csv",
]

BARYCENTER_CROP = 128


@dataclass(frozen=True)
class EmbeddingSet:
    """N embedding vectors with one label (class or sample id) each."""

    vectors: np.ndarray
    labels: tuple
    source: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError(f"vectors must be N x D with N >= 2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("vectors contain non-finite entries")
        if len(self.labels) != v.shape[0]:
            raise ValueError("need one label per vector")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", tuple(self.labels))


@dataclass(frozen=True)
class PcaView:
    """First three principal directions of a feature map, rendered as RGB."""

    components: np.ndarray       # (3, k), orthonormal rows
    projected: np.ndarray        # (H, W, 3) in [0, 1]
    explained_variance: np.ndarray

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float64)
        gram = comp @ comp.T
        if not np.allclose(gram, np.eye(3), atol=1e-6):
            raise ValueError("components must be orthonormal")
        object.__setattr__(self, "components", comp)


def tsne_embed(
    embeddings: EmbeddingSet,
    perplexity: float = 30.0,
    seed: int = 0,
    n_iter: int = 1000,
) -> np.ndarray:
    """2D t-SNE coordinates (PCA-initialized, deterministic under seed)."""
    n = embeddings.vectors.shape[0]
    if perplexity >= n / 3:
        raise ValueError(
            f"perplexity {perplexity} too large for {n} points (need < N/3)"
        )
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        init="pca",
        random_state=seed,
        max_iter=n_iter,
    )
    return tsne.fit_transform(embeddings.vectors)


def _orthonormal_completion(rows: np.ndarray, dim: int, want: int) -> np.ndarray:
    """Deterministically extend ``rows`` to ``want`` orthonormal vectors."""
    basis = list(rows)
    for i in range(dim):
        if len(basis) == want:
            break
        cand = np.zeros(dim)
        cand[i] = 1.0
        for b in basis:
            cand = cand - (cand @ b) * b
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            basis.append(cand / norm)
    return np.stack(basis[:want])


def pca_rgb(features) -> PcaView:
    """PCA of the pixel-feature matrix; first three components become RGB.

    Channels are min-max normalized independently; a zero-variance channel
    (e.g. a constant feature map) renders mid-gray with a warning.
    Feature matrices of rank < 3 get their missing directions padded with a
    deterministic orthonormal completion.
    """
    values = np.asarray(features.values, dtype=np.float64)
    h, w, k = values.shape
    if h * w < 3:
        raise ValueError("need at least 3 pixels for a 3-component PCA")
    x = values.reshape(-1, k)
    x = x - x.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(x, full_matrices=False)
    nonzero = int(np.sum(svals > 1e-10 * max(svals[0], 1e-30)))
    rank = min(nonzero, 3)
    if rank < 3:
        warnings.warn(
            f"feature matrix has rank {rank} < 3; padding missing components"
        )
    components = _orthonormal_completion(vt[:rank], k, 3)
    explained = np.zeros(3)
    explained[:rank] = (svals[:rank] ** 2) / (h * w)

    proj = (x @ components.T).reshape(h, w, 3)
    rgb = np.empty_like(proj)
    for c in range(3):
        channel = proj[..., c]
        lo, hi = channel.min(), channel.max()
        if hi - lo < 1e-12:
            rgb[..., c] = 0.5
        else:
            rgb[..., c] = (channel - lo) / (hi - lo)
    return PcaView(components=components, projected=rgb, explained_variance=explained)


# ---------------------------------------------------------------------------
# figures

def save_figure(fig, path) -> None:
    """Write a figure as both PNG and vector PDF."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path.with_suffix(".png"), dpi=150, bbox_inches="tight")
    fig.savefig(path.with_suffix(".pdf"), bbox_inches="tight")
    plt.close(fig)


def coords_to_csv(coords: np.ndarray, labels, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for (x, y), label in zip(coords, labels):
            writer.writerow([x, y, label])


def plot_embedding_scatter(coords: np.ndarray, labels, title: str = ""):
    fig, ax = plt.subplots(figsize=(7, 6))
    uniq = sorted(set(labels), key=str)
    cmap = plt.get_cmap("tab10")
    for i, lab in enumerate(uniq):
        sel = np.array([l == lab for l in labels])
        ax.scatter(coords[sel, 0], coords[sel, 1], s=12, alpha=0.7,
                   color=cmap(i % 10), label=str(lab))
    ax.legend(fontsize=8, markerscale=1.5, loc="best")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if title:
        ax.set_title(title)
    return fig


def barycenter_representatives(coords: np.ndarray, labels) -> dict:
    """Index of the point nearest each label's centroid."""
    reps = {}
    labels = list(labels)
    for lab in sorted(set(labels), key=str):
        sel = np.flatnonzero([l == lab for l in labels])
        centroid = coords[sel].mean(axis=0)
        reps[lab] = int(sel[np.argmin(np.sum((coords[sel] - centroid) ** 2, axis=1))])
    return reps


def plot_embedding_barycenters(
    coords: np.ndarray,
    labels,
    images: list[np.ndarray],
    crop: int = BARYCENTER_CROP,
    title: str = "",
):
    """Scatter with a representative image crop placed at each label centroid."""
    from matplotlib.offsetbox import AnnotationBbox, OffsetImage

    fig, ax = plt.subplots(figsize=(8, 7))
    ax.scatter(coords[:, 0], coords[:, 1], s=6, alpha=0.25, color="gray")
    reps = barycenter_representatives(coords, labels)
    labels = list(labels)
    for lab, idx in reps.items():
        img = np.asarray(images[idx])
        ch, cw = img.shape[0] // 2, img.shape[1] // 2
        half = crop // 2
        patch = img[max(0, ch - half) : ch + half, max(0, cw - half) : cw + half]
        sel = np.flatnonzero([l == lab for l in labels])
        centroid = coords[sel].mean(axis=0)
        box = AnnotationBbox(
            OffsetImage(patch, cmap="gray", zoom=0.4),
            centroid, frameon=True, pad=0.1,
        )
        ax.add_artist(box)
        ax.annotate(str(lab), centroid, textcoords="offset points",
                    xytext=(0, -30), ha="center", fontsize=8)
    if title:
        ax.set_title(title)
    return fig


def render_confusion(report: EvalReport, normalize: str = "row"):
    """Heatmap of the confusion matrix; rows are true classes.

    ``normalize='row'`` displays per-class recall percentages.
    """
    if normalize not in ("row", "none"):
        raise ValueError("normalize must be 'row' or 'none'")
    conf = report.confusion.astype(np.float64)
    if normalize == "row":
        sums = conf.sum(axis=1, keepdims=True)
        shown = np.divide(conf, sums, out=np.zeros_like(conf), where=sums > 0) * 100.0
        fmt, suffix = "{:.1f}", "%"
    else:
        shown = conf
        fmt, suffix = "{:.0f}", ""

    n = conf.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    im = ax.imshow(shown, cmap="Blues", vmin=0)
    ax.set_xticks(range(n), report.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), report.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = shown.max() / 2 if shown.max() > 0 else 0.5
    for i in range(n):
        for j in range(n):
            ax.text(j, i, fmt.format(shown[i, j]) + suffix,
                    ha="center", va="center", fontsize=9,
                    color="white" if shown[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, shrink=0.8)
    if report.method_name:
        ax.set_title(report.method_name)
    return fig


def mask_to_rgb(mask: LabelMask) -> np.ndarray:
    """Color a mask with exactly its palette colors."""
    lut = np.asarray(mask.palette.colors, dtype=np.uint8)
    return lut[mask.labels]


def mask_gallery(rows: list[tuple], captions: list[str], palette: ClassPalette):
    """Grid figure: one row per example, one column per caption.

    Each row holds arrays in caption order; 2D float arrays render as
    grayscale images, :class:`LabelMask` (or 2D int arrays) as palette
    colors.
    """
    if not rows:
        raise ValueError("empty gallery")
    n_cols = len(captions)
    for r in rows:
        if len(r) != n_cols:
            raise ValueError(f"every row needs {n_cols} entries, got {len(r)}")

    fig, axes = plt.subplots(
        len(rows), n_cols,
        figsize=(2.4 * n_cols, 2.4 * len(rows)), squeeze=False,
    )
    for i, row in enumerate(rows):
        for j, item in enumerate(row):
            ax = axes[i][j]
            if isinstance(item, LabelMask):
                ax.imshow(mask_to_rgb(item))
            else:
                arr = np.asarray(item)
                if np.issubdtype(arr.dtype, np.integer):
                    ax.imshow(mask_to_rgb(LabelMask(arr, palette)))
                else:
                    ax.imshow(arr, cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_axis_off()
            if i == 0:
                ax.set_title(captions[j], fontsize=10)
    fig.tight_layout()
    return fig
