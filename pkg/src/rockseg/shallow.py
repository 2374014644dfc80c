"""Random-forest pixel classification and k-nearest-neighbor models.

The forest consumes the 15-channel multiscale features from
:mod:`rockseg.preprocess`; kNN serves both whole-image classification on
backbone embeddings and dense segmentation probing on resampled feature
maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from itertools import product
from pathlib import Path

import joblib
import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .core import ClassPalette, LabelMask, iou
from .preprocess import FeatureMap, resize_bilinear, resize_nearest

__all__ = [
    "RfConfig",
    "KnnConfig",
    "RfModel",
    "rf_train",
    "rf_predict",
    "knn_classify_images",
    "knn_probe_segmentation",
    "DEFAULT_RF_GRID",
]

# search space used when cfg.grid is requested without an explicit one
DEFAULT_RF_GRID = {
    "n_trees": (50, 100, 200),
    "max_depth": (8, 16, None),
    "features_per_split": ("sqrt", "all"),
}


@dataclass(frozen=True)
class RfConfig:
    n_trees: int = 100
    max_depth: int | None = None
    features_per_split: str = "sqrt"     # "sqrt" or "all"
    bootstrap: bool = True
    seed: int = 0
    grid: dict | None = None             # search space over the fields above

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.features_per_split not in ("sqrt", "all"):
            raise ValueError("features_per_split must be 'sqrt' or 'all'")


@dataclass(frozen=True)
class KnnConfig:
    k: int = 50
    metric: str = "euclidean"            # "euclidean" or "cosine"
    task: str = "pixel_probing"          # or "image_classification"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError("metric must be 'euclidean' or 'cosine'")
        if self.task not in ("pixel_probing", "image_classification"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class RfModel:
    """Trained forest plus the metadata needed to apply and persist it."""

    clf: RandomForestClassifier
    feature_dim: int
    palette: ClassPalette
    config: RfConfig
    validation_iou: float | None = None
    grid_results: list = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        joblib.dump(self.clf, path.with_suffix(".joblib"))
        meta = {
            "feature_dim": self.feature_dim,
            "palette": {"names": list(self.palette.names),
                        "colors": [list(c) for c in self.palette.colors]},
            "config": {k: v for k, v in asdict(self.config).items() if k != "grid"},
            "validation_iou": self.validation_iou,
            "grid_results": self.grid_results,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "RfModel":
        path = Path(path)
        clf = joblib.load(path.with_suffix(".joblib"))
        meta = json.loads(path.with_suffix(".json").read_text())
        palette = ClassPalette(
            names=tuple(meta["palette"]["names"]),
            colors=tuple(tuple(c) for c in meta["palette"]["colors"]),
        )
        return cls(
            clf=clf,
            feature_dim=int(meta["feature_dim"]),
            palette=palette,
            config=RfConfig(**meta["config"]),
            validation_iou=meta.get("validation_iou"),
            grid_results=meta.get("grid_results", []),
        )


def _stack_pixels(features: list[FeatureMap], masks: list[LabelMask]):
    if len(features) != len(masks) or not features:
        raise ValueError("need equally many (non-empty) features and masks")
    xs, ys = [], []
    for fm, mask in zip(features, masks):
        if fm.values.shape[:2] != mask.shape:
            raise ValueError(
                f"feature map {fm.values.shape[:2]} does not match mask {mask.shape}"
            )
        xs.append(fm.values.reshape(-1, fm.k))
        ys.append(mask.labels.ravel())
    return np.concatenate(xs), np.concatenate(ys)


def _fit_forest(x, y, cfg: RfConfig) -> RandomForestClassifier:
    clf = RandomForestClassifier(
        n_estimators=cfg.n_trees,
        max_depth=cfg.max_depth,
        max_features=("sqrt" if cfg.features_per_split == "sqrt" else None),
        bootstrap=cfg.bootstrap,
        random_state=cfg.seed,
        n_jobs=-1,
    )
    clf.fit(x, y)
    return clf


def rf_train(
    features: list[FeatureMap],
    masks: list[LabelMask],
    cfg: RfConfig = RfConfig(),
) -> RfModel:
    """Train a pixel-classification forest, optionally grid-searched.

    With ``cfg.grid`` set (use :data:`DEFAULT_RF_GRID` for the standard
    space), 10% of the training slices are held out and the configuration
    with the best held-out mean IoU is refit on everything.
    """
    palette = masks[0].palette
    x, y = _stack_pixels(features, masks)
    if np.unique(y).size < 2:
        raise ValueError("training data contains a single class")

    if cfg.grid is None:
        clf = _fit_forest(x, y, cfg)
        return RfModel(clf, features[0].k, palette, cfg)

    grid = dict(cfg.grid)
    n_val = max(1, len(features) // 10)
    if len(features) - n_val < 1:
        raise ValueError("not enough slices to hold out a validation split")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(features))
    val_idx, fit_idx = order[:n_val], order[n_val:]
    x_fit, y_fit = _stack_pixels(
        [features[i] for i in fit_idx], [masks[i] for i in fit_idx])

    best, best_iou, results = None, -1.0, []
    keys = sorted(grid)
    for combo in product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        cand = RfConfig(seed=cfg.seed, bootstrap=cfg.bootstrap, **params)
        clf = _fit_forest(x_fit, y_fit, cand)
        model = RfModel(clf, features[0].k, palette, cand)
        scores = [
            iou(rf_predict(model, features[i]), masks[i]).mean_iou for i in val_idx
        ]
        score = float(np.mean(scores))
        results.append({**params, "val_iou": score})
        if score > best_iou:
            best, best_iou = cand, score

    clf = _fit_forest(x, y, best)
    return RfModel(clf, features[0].k, palette, best,
                   validation_iou=best_iou, grid_results=results)


def rf_predict(model: RfModel, features: FeatureMap) -> LabelMask:
    """Per-pixel majority vote of the forest; ties go to the lowest class."""
    if features.k != model.feature_dim:
        raise ValueError(
            f"feature dimension {features.k} does not match "
            f"training dimension {model.feature_dim}"
        )
    h, w, k = features.values.shape
    pred = model.clf.predict(features.values.reshape(-1, k))
    return LabelMask(pred.reshape(h, w).astype(np.int64), model.palette)


# ---------------------------------------------------------------------------
# k-nearest neighbors

def _pairwise_distances(test: np.ndarray, train: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        # squared distances preserve the neighbor ordering
        d = (
            np.sum(test**2, axis=1)[:, None]
            + np.sum(train**2, axis=1)[None, :]
            - 2.0 * test @ train.T
        )
        return np.maximum(d, 0.0)
    norms_a = np.linalg.norm(test, axis=1, keepdims=True)
    norms_b = np.linalg.norm(train, axis=1, keepdims=True)
    sim = (test / np.maximum(norms_a, 1e-12)) @ (train / np.maximum(norms_b, 1e-12)).T
    return 1.0 - sim


def _vote(neighbor_labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Majority vote per row; vote ties resolved toward the lowest class index."""
    votes = np.zeros((neighbor_labels.shape[0], n_classes), dtype=np.int64)
    for col in range(neighbor_labels.shape[1]):
        np.add.at(votes, (np.arange(len(votes)), neighbor_labels[:, col]), 1)
    return np.argmax(votes, axis=1)


def _knn_predict(train_x, train_y, test_x, k, metric, n_classes, chunk=4096):
    preds = np.empty(len(test_x), dtype=np.int64)
    for start in range(0, len(test_x), chunk):
        block = test_x[start : start + chunk]
        d = _pairwise_distances(block, train_x, metric)
        # stable sort: equal distances keep training insertion order
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        preds[start : start + len(block)] = _vote(train_y[nearest], n_classes)
    return preds


def knn_classify_images(
    train: list[tuple[np.ndarray, int]],
    test: list[np.ndarray],
    cfg: KnnConfig,
) -> np.ndarray:
    """Label each test embedding by majority vote of its k nearest neighbors."""
    if cfg.k > len(train):
        raise ValueError(f"k={cfg.k} exceeds training set size {len(train)}")
    train_x = np.stack([np.asarray(e, dtype=np.float64).ravel() for e, _ in train])
    train_y = np.asarray([label for _, label in train], dtype=np.int64)
    test_x = np.stack([np.asarray(e, dtype=np.float64).ravel() for e in test])
    if test_x.shape[1] != train_x.shape[1]:
        raise ValueError("embedding dimensions differ between train and test")
    n_classes = int(train_y.max()) + 1
    return _knn_predict(train_x, train_y, test_x, cfg.k, cfg.metric, n_classes)


def knn_probe_segmentation(
    train_features: list[FeatureMap],
    train_masks: list[LabelMask],
    test_features: FeatureMap,
    cfg: KnnConfig = KnnConfig(),
    probe_resolution: int = 128,
) -> LabelMask:
    """Dense kNN probing at a common probe resolution.

    Feature maps are bilinearly resampled and masks nearest-neighbor
    resampled to ``probe_resolution`` squared; each test pixel then takes the
    majority label of its k nearest training pixel-features.
    """
    if len(train_features) != len(train_masks) or not train_features:
        raise ValueError("need equally many (non-empty) features and masks")
    dim = train_features[0].k
    if test_features.k != dim:
        raise ValueError(
            f"test feature dimension {test_features.k} does not match train {dim}"
        )
    res = (probe_resolution, probe_resolution)
    palette = train_masks[0].palette

    train_x, train_y = [], []
    for fm, mask in zip(train_features, train_masks):
        if fm.k != dim:
            raise ValueError("inconsistent training feature dimensions")
        train_x.append(resize_bilinear(fm.values, res).reshape(-1, dim))
        train_y.append(resize_nearest(mask.labels, res).ravel())
    train_x = np.concatenate(train_x).astype(np.float64)
    train_y = np.concatenate(train_y)
    if cfg.k > len(train_x):
        raise ValueError(f"k={cfg.k} exceeds {len(train_x)} training pixels")

    test_x = resize_bilinear(test_features.values, res).reshape(-1, dim).astype(np.float64)
    preds = _knn_predict(train_x, train_y, test_x, cfg.k, cfg.metric, len(palette))
    return LabelMask(preds.reshape(res), palette)
