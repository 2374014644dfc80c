"""Training-free segmenters: multiclass Otsu, K-means and fuzzy C-means.

All three operate on pixel intensities and produce masks whose class indices
are ordered dark to bright; :func:`match_palette_by_gt_intensity` maps that
ordering onto a dataset palette once per dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassPalette, GraySlice, LabelMask

__all__ = [
    "ThresholdSet",
    "FcmState",
    "intensity_palette",
    "otsu_multiclass",
    "kmeans_1d",
    "kmeans_segment",
    "fcm_1d",
    "fcm_segment",
    "match_palette_by_gt_intensity",
    "relabel",
]

_GRAY_STEPS = (40, 90, 140, 190, 240)


def intensity_palette(n_classes: int) -> ClassPalette:
    """Anonymous dark-to-bright palette for unsupervised masks."""
    names = tuple(f"level_{i}" for i in range(n_classes))
    colors = tuple(
        (_GRAY_STEPS[i % 5],) * 3 if n_classes <= 5 else (int(255 * i / (n_classes - 1)),) * 3
        for i in range(n_classes)
    )
    return ClassPalette(names=names, colors=colors)


@dataclass(frozen=True)
class ThresholdSet:
    """Sorted intensity cut points partitioning [0, 1] into class intervals."""

    thresholds: tuple[float, ...]

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if any(not 0.0 < t < 1.0 for t in th):
            raise ValueError(f"thresholds must lie in (0, 1), got {th}")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {th}")

    @property
    def n_classes(self) -> int:
        return len(self.thresholds) + 1


@dataclass(frozen=True)
class FcmState:
    """Converged fuzzy C-means state: sorted centers and row-stochastic memberships."""

    centers: np.ndarray
    memberships: np.ndarray
    m: float

    def __post_init__(self):
        if self.m <= 1.0:
            raise ValueError(f"fuzzifier m must be > 1, got {self.m}")
        u = np.asarray(self.memberships, dtype=np.float64)
        if u.min() < -1e-12 or u.max() > 1.0 + 1e-12:
            raise ValueError("memberships must lie in [0, 1]")
        rowsum_err = np.abs(u.sum(axis=1) - 1.0).max()
        if rowsum_err > 1e-6:
            raise ValueError(f"membership rows must sum to 1, max error {rowsum_err:.3g}")
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=np.float64))
        object.__setattr__(self, "memberships", u)

    def objective(self, values: np.ndarray) -> float:
        """Sum over pixels and clusters of u^m * (x - c)^2."""
        d2 = (np.asarray(values, dtype=np.float64)[:, None] - self.centers[None, :]) ** 2
        return float(np.sum(self.memberships**self.m * d2))


# ---------------------------------------------------------------------------
# multiclass Otsu

def _interval_stat(cw: np.ndarray, cm: np.ndarray) -> np.ndarray:
    """stat[a, b] = (sum of count*value in bins [a, b))^2 / count, 0 on empty."""
    c = cw[None, :] - cw[:, None]
    m = cm[None, :] - cm[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.where(c > 0, m * m / np.where(c > 0, c, 1.0), 0.0)
    return stat


def otsu_multiclass(
    slc: GraySlice,
    n_classes: int,
    n_bins: int = 256,
    palette: ClassPalette | None = None,
) -> tuple[ThresholdSet, LabelMask]:
    """Thresholds that globally maximize between-class variance.

    The search is exact: a dynamic program over the binned histogram visits
    every admissible threshold placement (equivalent to exhaustive
    enumeration, with first-found tie-breaking on equal variance).  Classes
    are assigned by interval, ordered dark to bright.
    """
    if not 2 <= n_classes <= 5:
        raise ValueError(f"n_classes must be in [2, 5], got {n_classes}")
    if n_bins < 16:
        raise ValueError(f"n_bins must be >= 16, got {n_bins}")
    values = slc.pixels.ravel().astype(np.float64)
    if np.unique(values).size < n_classes:
        raise ValueError(
            f"need at least {n_classes} distinct intensities, "
            f"got {np.unique(values).size}"
        )

    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, 1.0))
    if np.count_nonzero(counts) < n_classes:
        raise ValueError("fewer occupied histogram bins than classes; increase n_bins")
    centers = 0.5 * (edges[:-1] + edges[1:])
    cw = np.concatenate([[0.0], np.cumsum(counts)])
    cm = np.concatenate([[0.0], np.cumsum(counts * centers)])
    stat = _interval_stat(cw, cm)  # (n_bins+1, n_bins+1), stat[a, b] for bins [a, b)

    # dp[i] = best score for covering bins [0, i) with the classes placed so
    # far; every class must own at least one bin, hence the j-range masks
    n_edges = n_bins + 1
    edge_idx = np.arange(n_edges)
    dp = stat[0, :].copy()
    dp[0] = -np.inf  # the first class may not be empty
    back = [np.zeros(n_edges, dtype=np.int64)]
    for k in range(1, n_classes):
        cand = dp[:, None] + stat  # cand[j, i] = dp[j] + stat[j, i)
        valid = (edge_idx[:, None] < edge_idx[None, :]) & (edge_idx[:, None] >= k)
        cand = np.where(valid, cand, -np.inf)
        back.append(np.argmax(cand, axis=0))
        dp = np.max(cand, axis=0)

    splits = []
    i = n_bins
    for k in range(n_classes - 1, 0, -1):
        i = int(back[k][i])
        splits.append(i)
    splits.reverse()
    thresholds = ThresholdSet(tuple(edges[j] for j in splits))

    labels = np.digitize(slc.pixels, thresholds.thresholds).astype(np.int64)
    pal = palette if palette is not None else intensity_palette(n_classes)
    if len(pal) != n_classes:
        raise ValueError("palette size must match n_classes")
    return thresholds, LabelMask(labels, pal)


# ---------------------------------------------------------------------------
# K-means

def kmeans_1d(
    values: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations on 1D intensities with k-means++ seeding.

    Returns (centers sorted ascending, labels matching that order, SSE per
    iteration).  The SSE sequence is non-increasing.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if np.unique(x).size < k:
        raise ValueError(f"degenerate image: fewer than {k} distinct intensities")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty(k, dtype=np.float64)
    centers[0] = x[rng.integers(len(x))]
    d2 = (x - centers[0]) ** 2
    for j in range(1, k):
        probs = d2 / d2.sum()
        centers[j] = x[rng.choice(len(x), p=probs)]
        d2 = np.minimum(d2, (x - centers[j]) ** 2)

    sse_history: list[float] = []
    labels = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        dist = np.abs(x[:, None] - centers[None, :])
        labels = np.argmin(dist, axis=1)
        sse_history.append(float(np.sum((x - centers[labels]) ** 2)))
        new_centers = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if members.size:
                new_centers[j] = members.mean()
            else:  # empty cluster: grab the point farthest from its center
                far = np.argmax((x - centers[labels]) ** 2)
                new_centers[j] = x[far]
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break

    order = np.argsort(centers)
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return centers[order], remap[labels], sse_history


def kmeans_segment(
    slc: GraySlice,
    k: int,
    seed: int,
    palette: ClassPalette | None = None,
) -> LabelMask:
    """K-means pixel clustering; class indices ordered by ascending center."""
    _, labels, _ = kmeans_1d(slc.pixels.ravel(), k, seed)
    pal = palette if palette is not None else intensity_palette(k)
    if len(pal) != k:
        raise ValueError("palette size must match k")
    return LabelMask(labels.reshape(slc.shape), pal)


# ---------------------------------------------------------------------------
# fuzzy C-means

def fcm_1d(
    values: np.ndarray,
    c: int,
    m: float = 2.0,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
):
    """Alternating fuzzy C-means updates on 1D intensities.

    Returns (FcmState with centers sorted ascending, labels, diagnostics)
    where diagnostics holds the objective and the maximum membership
    row-sum error after every iteration.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if c < 2:
        raise ValueError(f"c must be >= 2, got {c}")
    if m <= 1.0:
        raise ValueError(f"fuzzifier m must be > 1, got {m}")
    if np.unique(x).size < c:
        raise ValueError(f"degenerate image: fewer than {c} distinct intensities")
    rng = np.random.default_rng(seed)

    u = rng.random((len(x), c))
    u /= u.sum(axis=1, keepdims=True)

    exponent = 1.0 / (m - 1.0)
    centers = np.zeros(c, dtype=np.float64)
    diagnostics = {"objective": [], "rowsum_max_err": []}
    for _ in range(max_iter):
        um = u**m
        new_centers = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
        d2 = (x[:, None] - new_centers[None, :]) ** 2

        zero_rows = np.any(d2 == 0.0, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = (1.0 / d2) ** exponent
            u = inv / inv.sum(axis=1, keepdims=True)
        if zero_rows.any():  # pixel sits exactly on a center: full membership there
            hit = d2[zero_rows] == 0.0
            u[zero_rows] = hit / hit.sum(axis=1, keepdims=True)

        diagnostics["objective"].append(float(np.sum(u**m * d2)))
        diagnostics["rowsum_max_err"].append(float(np.abs(u.sum(axis=1) - 1.0).max()))
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < tol:
            break

    order = np.argsort(centers)
    state = FcmState(centers=centers[order], memberships=u[:, order], m=m)
    labels = np.argmax(state.memberships, axis=1)
    return state, labels, diagnostics


def fcm_segment(
    slc: GraySlice,
    c: int,
    m: float = 2.0,
    seed: int = 0,
    palette: ClassPalette | None = None,
) -> tuple[FcmState, LabelMask]:
    """Fuzzy C-means segmentation; mask is the argmax membership per pixel."""
    state, labels, _ = fcm_1d(slc.pixels.ravel(), c, m, seed)
    pal = palette if palette is not None else intensity_palette(c)
    if len(pal) != c:
        raise ValueError("palette size must match c")
    return state, LabelMask(labels.reshape(slc.shape), pal)


# ---------------------------------------------------------------------------
# palette correspondence

def match_palette_by_gt_intensity(
    slices: list[GraySlice],
    gt_masks: list[LabelMask],
) -> np.ndarray:
    """Map intensity-ordered cluster indices onto the dataset palette.

    Computes the mean intensity of every palette class over the given
    ground-truth pairs; entry ``i`` of the result is the palette index of the
    i-th darkest class.  Computed once per dataset, applied to every
    unsupervised mask via :func:`relabel`.
    """
    if not slices or len(slices) != len(gt_masks):
        raise ValueError("need equally many slices and masks")
    n = len(gt_masks[0].palette)
    sums = np.zeros(n, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for slc, mask in zip(slices, gt_masks):
        if slc.shape != mask.shape:
            raise ValueError("slice/mask shape mismatch")
        sums += np.bincount(mask.labels.ravel(), weights=slc.pixels.ravel(), minlength=n)
        counts += np.bincount(mask.labels.ravel(), minlength=n)
    if (counts == 0).any():
        missing = [gt_masks[0].palette.names[i] for i in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes never seen in ground truth: {missing}")
    order = np.argsort(sums / counts)
    return order.astype(np.int64)


def relabel(mask: LabelMask, order: np.ndarray, palette: ClassPalette) -> LabelMask:
    """Apply an intensity-rank-to-palette mapping from
    :func:`match_palette_by_gt_intensity`."""
    if len(order) != len(palette):
        raise ValueError("order length must match palette size")
    return LabelMask(np.asarray(order)[mask.labels], palette)
