"""Experiment orchestration: ablations, data-regime sweeps and tables.

Every runner draws deterministic splits, executes registered methods over a
(method, n_train, seed) grid, and aggregates the resulting
:class:`~rockseg.core.EvalReport` objects into CSV tables and plots.  Run
outputs land in ``runs/<config-hash>/`` with atomic writes so sweeps can be
resumed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .classical import (
    fcm_segment,
    kmeans_segment,
    match_palette_by_gt_intensity,
    otsu_multiclass,
    relabel,
)
from .core import (
    ClassPalette,
    EvalReport,
    GraySlice,
    LabelMask,
    confusion_matrix,
    report_from_confusion,
)
from .ingest import (
    DatasetCatalog,
    IngestError,
    SliceRef,
    SplitSpec,
    list_slices,
    load_from_ref,
    make_split,
    train_test_split_images,
)
from .preprocess import (
    AugmentConfig,
    BfeConfig,
    augment,
    bfe,
    nl_means,
    resize_bilinear,
    resize_nearest,
)
from .shallow import (
    KnnConfig,
    RfConfig,
    knn_classify_images,
    knn_probe_segmentation,
    rf_predict,
    rf_train,
)

__all__ = [
    "SweepSpec",
    "RunRecord",
    "BenchContext",
    "METHODS",
    "ABLATION_METHODS",
    "run_single",
    "run_sweep",
    "run_ablation",
    "run_classical",
    "run_probing",
    "run_classification",
]

# pyplot keeps global state; one figure at a time even in parallel sweeps
_FIGURE_LOCK = threading.Lock()

DATASET_HELP = (
    "datasets are referenced by path and never redistributed; populate the "
    "catalog with the converted public carbonate (S1/S2/S3) and sandstone "
    "volumes (see README, 'Datasets')"
)


@dataclass(frozen=True)
class SweepSpec:
    methods: tuple[str, ...]
    n_train_grid: tuple[int, ...] = (4, 10, 20, 50, 100, 200, 500, 1000, 1200)
    n_seeds: int = 5
    test_sample: str = "S3"
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        grid = tuple(int(n) for n in self.n_train_grid)
        object.__setattr__(self, "n_train_grid", grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("n_train_grid must be sorted ascending")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")


@dataclass
class RunRecord:
    report: EvalReport
    wall_clock: float
    device: str
    config_hash: str

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.config_hash,
            "wall_clock": self.wall_clock,
            "device": self.device,
            "report": json.loads(self.report.to_json()),
        }, indent=2, sort_keys=True)


@dataclass
class BenchContext:
    """Everything a method needs beyond its train/test pairs.

    The stub fields (``backbone_stub_*``) swap the full backbone for a small
    random one so pipelines can be exercised without checkpoints.
    """

    palette: ClassPalette
    device: str = "cpu"
    checkpoints: dict = field(default_factory=dict)   # backbone size -> path
    checkpoint_hashes: dict = field(default_factory=dict)  # size -> sha256
    checkpoint_save_dir: Path | None = None
    backbone_size: str = "base"
    backbone_stub_dim: int | None = None
    backbone_stub_depth: int = 2
    denoise_classical: bool = True
    nlm_patch_size: int = 5
    nlm_search_window: int = 21
    nlm_strength: float | None = None
    bfe_scales: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    epochs: int = 20
    batch_size: int = 15
    lr: float = 1e-4
    lora_r: int = 32
    quant_enabled: bool = True
    crop_size: int = 224
    upsample_size: int = 560
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.9, 1.1)
    knn_k: int = 50
    probe_resolution: int = 128
    probe_n_train: int = 200
    probe_n_test: int = 100
    probe_epochs: int = 10
    rf_grid: dict | None = None
    constant_class: int | None = None
    save_masks: bool = True

    def augment_config(self, seed: int) -> AugmentConfig:
        return AugmentConfig(
            crop_size=self.crop_size, upsample_size=self.upsample_size,
            flip_h_prob=self.flip_h_prob, flip_v_prob=self.flip_v_prob,
            contrast_range=tuple(self.contrast_range),
            brightness_range=tuple(self.brightness_range),
            gamma_range=tuple(self.gamma_range), seed=seed,
        )

    def bfe_config(self) -> BfeConfig:
        return BfeConfig(scales=tuple(self.bfe_scales))


def _load_pairs(refs: list[SliceRef], palette: ClassPalette):
    return [load_from_ref(ref, palette) for ref in refs]


def _accumulate(preds: list[LabelMask], gts: list[LabelMask], palette: ClassPalette):
    total = np.zeros((len(palette), len(palette)), dtype=np.int64)
    for p, g in zip(preds, gts):
        total += confusion_matrix(p, g)
    return total


# ---------------------------------------------------------------------------
# methods

def _maybe_denoise(slc: GraySlice, ctx: BenchContext) -> GraySlice:
    if not ctx.denoise_classical:
        return slc
    return nl_means(slc, patch_size=ctx.nlm_patch_size,
                    search_window=ctx.nlm_search_window,
                    strength=ctx.nlm_strength)


def _classical_method(kind: str):
    def method(train_pairs, test_pairs, seed: int, ctx: BenchContext):
        # palette correspondence is data-driven, computed once per dataset
        ref_pairs = train_pairs if train_pairs else test_pairs
        order = match_palette_by_gt_intensity(
            [s for s, _ in ref_pairs], [m for _, m in ref_pairs])
        preds, gts, info = [], [], {}
        for slc, gt in test_pairs:
            work = _maybe_denoise(slc, ctx)
            n = len(ctx.palette)
            if kind == "otsu":
                thresholds, raw = otsu_multiclass(work, n)
                info.setdefault("thresholds", []).append(list(thresholds.thresholds))
            elif kind == "kmeans":
                raw = kmeans_segment(work, n, seed)
            else:
                state, raw = fcm_segment(work, n, seed=seed)
                info.setdefault("centers", []).append(state.centers.tolist())
            preds.append(relabel(raw, order, ctx.palette))
            gts.append(gt)
        return preds, gts, info

    return method


def _rf_bfe_method(train_pairs, test_pairs, seed: int, ctx: BenchContext):
    cfg = RfConfig(seed=seed, grid=ctx.rf_grid)
    bfe_cfg = ctx.bfe_config()
    feats = [bfe(_maybe_denoise(s, ctx), bfe_cfg) for s, _ in train_pairs]
    masks = [m for _, m in train_pairs]
    model = rf_train(feats, masks, cfg)
    preds, gts = [], []
    for slc, gt in test_pairs:
        preds.append(rf_predict(model, bfe(_maybe_denoise(slc, ctx), bfe_cfg)))
        gts.append(gt)
    info = {"validation_iou": model.validation_iou,
            "grid_results": model.grid_results}
    return preds, gts, info


def _constant_method(train_pairs, test_pairs, seed: int, ctx: BenchContext):
    """Mock predictor: the training majority class everywhere."""
    if ctx.constant_class is not None:
        label = ctx.constant_class
    else:
        counts = np.zeros(len(ctx.palette), dtype=np.int64)
        for _, m in train_pairs:
            counts += np.bincount(m.labels.ravel(), minlength=len(ctx.palette))
        label = int(np.argmax(counts))
    preds, gts = [], []
    for _, gt in test_pairs:
        preds.append(LabelMask(np.full(gt.shape, label, dtype=np.int64), ctx.palette))
        gts.append(gt)
    return preds, gts, {"constant_class": label}


def _build_vit_backbone(ctx: BenchContext, layers_used: tuple[int, ...], seed: int):
    from .neural import BackboneSpec, build_backbone, build_stub_backbone
    from .neural.backbone import default_checkpoint_path

    if ctx.backbone_stub_dim is not None:
        model = build_stub_backbone(
            embed_dim=ctx.backbone_stub_dim, depth=ctx.backbone_stub_depth, seed=seed
        )
        dim = ctx.backbone_stub_dim
    else:
        spec = BackboneSpec(size=ctx.backbone_size, layers_used=layers_used)
        # published weights are mandatory outside stub mode
        checkpoint = ctx.checkpoints.get(ctx.backbone_size) or default_checkpoint_path(spec)
        model = build_backbone(
            spec, checkpoint=checkpoint, seed=seed,
            expected_sha256=ctx.checkpoint_hashes.get(ctx.backbone_size),
        )
        dim = spec.feature_dim
    return model, dim * len(layers_used)


def _vit_method(head_kind: str, fine_tune: bool, layers_used: tuple[int, ...] = (-1,)):
    def method(train_pairs, test_pairs, seed: int, ctx: BenchContext):
        from .neural import (
            HeadSpec, LoraConfig, QuantConfig, SegModel,
            apply_lora, build_head, quantize,
        )

        backbone, in_dim = _build_vit_backbone(ctx, layers_used, seed)
        if fine_tune:
            if ctx.quant_enabled:
                backbone = quantize(backbone, QuantConfig())
            backbone = apply_lora(backbone, LoraConfig(r=ctx.lora_r))
        else:
            for p in backbone.parameters():
                p.requires_grad_(False)
        head = build_head(HeadSpec(
            kind=head_kind, in_dim=in_dim, n_classes=len(ctx.palette),
            output_size=ctx.upsample_size,
        ))
        model = SegModel(head=head, backbone=backbone, kind="vit",
                         layers_used=layers_used,
                         name=f"vit_{head_kind}{'_ft' if fine_tune else ''}")
        return _train_and_eval(model, train_pairs, test_pairs, seed, ctx)

    return method


def _baseline_method(kind: str):
    def method(train_pairs, test_pairs, seed: int, ctx: BenchContext):
        from .neural import LoraConfig, QuantConfig, build_baseline

        if kind == "resnet152_convhead":
            model = build_baseline(
                kind, n_classes=len(ctx.palette), seed=seed,
                quant=QuantConfig() if ctx.quant_enabled else None,
                lora=LoraConfig(r=ctx.lora_r),
            )
        else:
            model = build_baseline(kind, n_classes=len(ctx.palette), seed=seed)
        if kind == "unet_large":  # memory limit: batch 15 -> 8
            ctx = replace(ctx, batch_size=min(ctx.batch_size, 8))
        return _train_and_eval(model, train_pairs, test_pairs, seed, ctx)

    return method


def _train_and_eval(model, train_pairs, test_pairs, seed: int, ctx: BenchContext):
    from .neural import TrainConfig, predict_mask, train_segmenter

    cfg = TrainConfig(
        epochs=ctx.epochs, batch_size=ctx.batch_size, lr=ctx.lr,
        n_train_images=len(train_pairs), seed=seed, device=ctx.device,
        augment=ctx.augment_config(seed),
    )
    model, history = train_segmenter(model, train_pairs, test_pairs, cfg)
    eval_aug = cfg.augment.deterministic_variant()
    preds, gts = [], []
    for slc, gt in test_pairs:
        _, gt_prepared = augment(slc, gt, eval_aug)
        preds.append(predict_mask(model, slc, ctx.palette, cfg))
        gts.append(gt_prepared)
    info = {
        "trainable_parameters": model.trainable_parameters(),
        "total_parameters": model.total_parameters(),
        "history": history,
    }
    if ctx.checkpoint_save_dir is not None:
        from .neural import save_checkpoint

        path = Path(ctx.checkpoint_save_dir)
        path.mkdir(parents=True, exist_ok=True)
        ckpt = path / f"{model.name}_n{len(train_pairs)}_seed{seed}.pt"
        save_checkpoint(model, ckpt, {
            "seed": seed, "n_train_images": len(train_pairs),
            "epochs": ctx.epochs, "lr": ctx.lr, "lora_r": ctx.lora_r,
            "quantized": ctx.quant_enabled,
        })
        info["checkpoint"] = str(ckpt)
    return preds, gts, info


def _knn_probe_method(feature_kind: str):
    def method(train_pairs, test_pairs, seed: int, ctx: BenchContext):
        feats_train, masks_train = _probe_features(train_pairs, feature_kind, ctx, seed)
        feats_test, masks_test = _probe_features(test_pairs, feature_kind, ctx, seed)
        cfg = KnnConfig(k=ctx.knn_k)
        preds, gts = [], []
        res = (ctx.probe_resolution, ctx.probe_resolution)
        for fm, gt in zip(feats_test, masks_test):
            preds.append(knn_probe_segmentation(
                feats_train, masks_train, fm, cfg, ctx.probe_resolution))
            gts.append(LabelMask(resize_nearest(gt.labels, res), ctx.palette))
        return preds, gts, {"k": ctx.knn_k, "resolution": ctx.probe_resolution}

    return method


def _probe_features(pairs, feature_kind: str, ctx: BenchContext, seed: int):
    """Deterministically prepared slices -> feature maps + matching masks."""
    from .neural import extract_features

    eval_aug = ctx.augment_config(0).deterministic_variant()
    feats, masks = [], []
    backbone = None
    if feature_kind == "vit":
        backbone, _ = _build_vit_backbone(ctx, (-1,), seed)
    for slc, gt in pairs:
        prepared, gt_prepared = augment(slc, gt, eval_aug)
        if feature_kind == "vit":
            feats.append(extract_features(backbone, prepared, (-1,)))
        else:
            feats.append(bfe(prepared))
        masks.append(gt_prepared)
    return feats, masks


METHODS = {
    "otsu": _classical_method("otsu"),
    "kmeans": _classical_method("kmeans"),
    "fcm": _classical_method("fcm"),
    "rf_bfe": _rf_bfe_method,
    "constant": _constant_method,
    "knn_probe_vit": _knn_probe_method("vit"),
    "knn_probe_bfe": _knn_probe_method("bfe"),
    "dinov2_linear": _vit_method("linear", fine_tune=False),
    "dinov2_linear_ft": _vit_method("linear", fine_tune=True),
    "dinov2_conv": _vit_method("conv", fine_tune=False),
    "dinov2_conv_ft": _vit_method("conv", fine_tune=True),
    "unet_small": _baseline_method("unet_small"),
    "unet_large": _baseline_method("unet_large"),
    "resnet152_conv_ft": _baseline_method("resnet152_convhead"),
}

# model/head combinations of the ablation table
ABLATION_METHODS = (
    "dinov2_linear", "dinov2_linear_ft", "dinov2_conv", "dinov2_conv_ft",
    "unet_small", "unet_large", "resnet152_conv_ft",
)


# ---------------------------------------------------------------------------
# run plumbing

def _config_hash(method: str, n_train: int, seed: int) -> str:
    payload = json.dumps(
        {"method": method, "n_train": n_train, "seed": seed, "version": __version__},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _require_segmentation(catalog: DatasetCatalog) -> None:
    if not catalog.sample_ids("segmentation"):
        raise IngestError(f"no segmentation samples in catalog; {DATASET_HELP}")


def _load_existing_record(run_dir: Path) -> RunRecord | None:
    record_path = run_dir / "record.json"
    if not record_path.exists():
        return None
    payload = json.loads(record_path.read_text())
    return RunRecord(
        report=EvalReport.from_json(json.dumps(payload["report"])),
        wall_clock=payload["wall_clock"],
        device=payload["device"],
        config_hash=payload["config_hash"],
    )


def run_single(
    method: str,
    catalog: DatasetCatalog,
    ctx: BenchContext,
    n_train: int,
    seed: int,
    test_sample: str,
    out_dir: Path | None = None,
    resume: bool = True,
) -> RunRecord:
    """Execute one (method, n_train, seed) cell and persist its record.

    When a record for this config hash already exists under ``out_dir`` it is
    returned as-is (``resume=False`` forces recomputation).
    """
    if method not in METHODS:
        raise KeyError(f"unknown method {method!r}; registered: {sorted(METHODS)}")
    if out_dir is not None and resume:
        existing = _load_existing_record(
            Path(out_dir) / "runs" / _config_hash(method, n_train, seed))
        if existing is not None:
            return existing
    _require_segmentation(catalog)
    train_samples = tuple(
        s for s in catalog.sample_ids("segmentation") if s != test_sample
    )
    if not train_samples:
        raise IngestError(f"no training samples besides {test_sample}; {DATASET_HELP}")
    split = SplitSpec(train_samples=train_samples, test_samples=(test_sample,),
                      n_train_images=n_train, seed=seed)
    train_refs, test_refs = make_split(catalog, split)

    train_keys = {(r.sample_id, r.slice_index) for r in train_refs}
    test_keys = {(r.sample_id, r.slice_index) for r in test_refs}
    assert not train_keys & test_keys, "train/test slice leak"

    train_pairs = _load_pairs(train_refs, ctx.palette)
    test_pairs = _load_pairs(test_refs, ctx.palette)

    start = time.perf_counter()
    preds, gts, info = METHODS[method](train_pairs, test_pairs, seed, ctx)
    elapsed = time.perf_counter() - start

    conf = _accumulate(preds, gts, ctx.palette)
    report = report_from_confusion(
        conf, ctx.palette.names,
        method_name=method, n_train_images=n_train, seed=seed,
    )
    record = RunRecord(report=report, wall_clock=elapsed, device=ctx.device,
                       config_hash=_config_hash(method, n_train, seed))
    if out_dir is not None:
        run_dir = Path(out_dir) / "runs" / record.config_hash
        _atomic_write(run_dir / "report.json", report.to_json())
        _atomic_write(run_dir / "record.json", record.to_json())
        _atomic_write(run_dir / "info.json", json.dumps(info, indent=2, default=str))
        if ctx.save_masks:
            from .ingest import save_mask

            mask_dir = run_dir / "masks"
            mask_dir.mkdir(parents=True, exist_ok=True)
            for ref, pred in zip(test_refs, preds):
                save_mask(pred, mask_dir / f"{ref.sample_id}_{ref.slice_index:05d}")
        from .interpret import render_confusion, save_figure

        with _FIGURE_LOCK:
            save_figure(render_confusion(report), run_dir / "figures" / "confusion")
    return record


def _aggregate(records: list[RunRecord]) -> list[dict]:
    cells: dict[tuple[str, int], list[float]] = {}
    for rec in records:
        key = (rec.report.method_name, rec.report.n_train_images)
        cells.setdefault(key, []).append(rec.report.mean_iou)
    rows = []
    for (method, n_train), scores in sorted(cells.items()):
        rows.append({
            "method": method,
            "n_train": n_train,
            "mean_iou": float(np.mean(scores)),
            "std_iou": float(np.std(scores)),
            "n_seeds": len(scores),
        })
    return rows


def _write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def run_sweep(
    spec: SweepSpec,
    catalog: DatasetCatalog,
    ctx: BenchContext,
    out_dir,
    n_workers: int = 1,
) -> list[dict]:
    """IoU versus training-set size for every method in ``spec``.

    Each grid point is averaged over ``spec.n_seeds`` seeded repetitions;
    per-run records land under ``runs/`` and the aggregate in
    ``results.csv`` plus a curve plot.  Grid points are independent jobs:
    sequential by default, ``n_workers > 1`` runs them in a thread pool.
    """
    out_dir = Path(out_dir)
    cells = [
        (method, n_train, spec.base_seed + rep)
        for method in spec.methods
        for n_train in spec.n_train_grid
        for rep in range(spec.n_seeds)
    ]
    if n_workers <= 1:
        records = [
            run_single(m, catalog, ctx, n, seed=s,
                       test_sample=spec.test_sample, out_dir=out_dir)
            for m, n, s in cells
        ]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            records = list(pool.map(
                lambda cell: run_single(cell[0], catalog, ctx, cell[1],
                                        seed=cell[2],
                                        test_sample=spec.test_sample,
                                        out_dir=out_dir),
                cells,
            ))
    rows = _aggregate(records)
    _write_csv(rows, out_dir / "results.csv")
    _plot_sweep(rows, out_dir / "iou_vs_n_train")
    return rows


def _plot_sweep(rows: list[dict], path: Path) -> None:
    import matplotlib.pyplot as plt

    from .interpret import save_figure

    fig, ax = plt.subplots(figsize=(7, 5))
    methods = sorted({r["method"] for r in rows})
    for method in methods:
        pts = sorted(
            (r["n_train"], r["mean_iou"], r["std_iou"])
            for r in rows if r["method"] == method
        )
        x, y, err = zip(*pts)
        ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=method)
    ax.set_xscale("log")
    ax.set_xlabel("training images")
    ax.set_ylabel("mean IoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    save_figure(fig, path)


def run_ablation(
    catalog: DatasetCatalog,
    ctx: BenchContext,
    out_dir,
    methods: tuple[str, ...] = ABLATION_METHODS,
    n_train: int = 1000,
    n_seeds: int = 5,
    test_sample: str = "S3",
    base_seed: int = 0,
) -> list[dict]:
    """Mean IoU (over seeds) per model/head combination at a fixed n_train."""
    out_dir = Path(out_dir)
    rows = []
    for method in methods:
        scores, params = [], None
        for rep in range(n_seeds):
            rec = run_single(method, catalog, ctx, n_train,
                             seed=base_seed + rep, test_sample=test_sample,
                             out_dir=out_dir)
            scores.append(rec.report.mean_iou)
            info_path = out_dir / "runs" / rec.config_hash / "info.json"
            info = json.loads(info_path.read_text())
            params = info.get("trainable_parameters", params)
        rows.append({
            "method": method,
            "n_train": n_train,
            "mean_iou": float(np.mean(scores)),
            "std_iou": float(np.std(scores)),
            "trainable_parameters": params if params is not None else "",
        })
    _write_csv(rows, out_dir / "ablation.csv")
    return rows


def run_classical(
    catalog: DatasetCatalog,
    ctx: BenchContext,
    out_dir,
    methods: tuple[str, ...] = ("otsu", "kmeans", "fcm"),
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Method x sample IoU grid over the segmentation samples."""
    _require_segmentation(catalog)
    out_dir = Path(out_dir)
    grid: dict[str, dict[str, float]] = {m: {} for m in methods}
    rows = []
    for sample_id in sorted(catalog.sample_ids("segmentation")):
        pairs = _load_pairs(list_slices(catalog[sample_id]), ctx.palette)
        for method in methods:
            preds, gts, _ = METHODS[method]([], pairs, seed, ctx)
            conf = _accumulate(preds, gts, ctx.palette)
            report = report_from_confusion(conf, ctx.palette.names,
                                           method_name=method, seed=seed)
            grid[method][sample_id] = report.mean_iou
            rows.append({"method": method, "sample": sample_id,
                         "mean_iou": report.mean_iou})
    _write_csv(rows, out_dir / "classical.csv")
    return grid


# ---------------------------------------------------------------------------
# probing and classification

def _linear_probe(train_feats, train_masks, test_feats, test_masks, ctx, seed):
    """Train a 1x1 projection on frozen features; evaluate at full size."""
    import torch

    from .neural import HeadSpec, LinearHead

    torch.manual_seed(seed)
    in_dim = train_feats[0].k
    head = LinearHead(HeadSpec(kind="linear", in_dim=in_dim,
                               n_classes=len(ctx.palette),
                               output_size=ctx.upsample_size))
    optimizer = torch.optim.AdamW(head.parameters(), lr=1e-3)
    criterion = torch.nn.CrossEntropyLoss()

    tensors = [
        torch.from_numpy(np.ascontiguousarray(f.values)).permute(2, 0, 1)[None]
        for f in train_feats
    ]
    targets = [torch.from_numpy(np.ascontiguousarray(m.labels)).long()[None]
               for m in train_masks]
    order_rng = np.random.default_rng(seed)
    for _ in range(ctx.probe_epochs):
        for i in order_rng.permutation(len(tensors)):
            optimizer.zero_grad()
            loss = criterion(head(tensors[i]), targets[i])
            loss.backward()
            optimizer.step()

    head.eval()
    preds, gts = [], []
    with torch.no_grad():
        for fm, gt in zip(test_feats, test_masks):
            x = torch.from_numpy(np.ascontiguousarray(fm.values)).permute(2, 0, 1)[None]
            pred = head(x).argmax(dim=1)[0].numpy().astype(np.int64)
            preds.append(LabelMask(pred, ctx.palette))
            gts.append(gt)
    return preds, gts


def _probe_split(catalog: DatasetCatalog, ctx: BenchContext, seed: int,
                 test_sample: str):
    train_samples = tuple(
        s for s in catalog.sample_ids("segmentation") if s != test_sample
    )
    split = SplitSpec(train_samples=train_samples, test_samples=(test_sample,),
                      n_train_images=ctx.probe_n_train, seed=seed)
    train_refs, test_refs = make_split(catalog, split)
    rng = np.random.default_rng([seed, 1])
    if len(test_refs) > ctx.probe_n_test:
        keep = sorted(rng.choice(len(test_refs), ctx.probe_n_test, replace=False))
        test_refs = [test_refs[i] for i in keep]
    return (_load_pairs(train_refs, ctx.palette),
            _load_pairs(test_refs, ctx.palette))


def run_probing(
    catalog: DatasetCatalog,
    ctx: BenchContext,
    out_dir,
    backbone_sizes: tuple[str, ...] = ("small", "base", "large"),
    layer_variants: tuple[tuple[int, ...], ...] = ((-1,), (-4, -3, -2, -1)),
    seed: int = 0,
    test_sample: str = "S3",
) -> list[dict]:
    """kNN and linear probing of frozen features (backbones and BFE)."""
    from .neural import extract_features

    _require_segmentation(catalog)
    out_dir = Path(out_dir)
    train_pairs, test_pairs = _probe_split(catalog, ctx, seed, test_sample)
    eval_aug = ctx.augment_config(0).deterministic_variant()
    prepared_train = [augment(s, m, eval_aug) for s, m in train_pairs]
    prepared_test = [augment(s, m, eval_aug) for s, m in test_pairs]

    rows = []

    def _evaluate(preds, gts, name, variant):
        conf = _accumulate(preds, gts, ctx.palette)
        report = report_from_confusion(conf, ctx.palette.names,
                                       method_name=f"{name}:{variant}", seed=seed)
        rows.append({"extractor": name, "probe": variant,
                     "mean_iou": report.mean_iou})

    res = (ctx.probe_resolution, ctx.probe_resolution)

    def _knn_eval(feats_train, masks_train, feats_test, masks_test, name):
        cfg = KnnConfig(k=ctx.knn_k)
        preds, gts = [], []
        for fm, gt in zip(feats_test, masks_test):
            preds.append(knn_probe_segmentation(feats_train, masks_train, fm,
                                                cfg, ctx.probe_resolution))
            gts.append(LabelMask(resize_nearest(gt.labels, res), ctx.palette))
        _evaluate(preds, gts, name, "knn")

    for size in backbone_sizes:
        size_ctx = replace(ctx, backbone_size=size)
        for layers in layer_variants:
            backbone, _ = _build_vit_backbone(size_ctx, layers, seed)
            feats_train = [extract_features(backbone, s, layers)
                           for s, _ in prepared_train]
            feats_test = [extract_features(backbone, s, layers)
                          for s, _ in prepared_test]
            masks_train = [m for _, m in prepared_train]
            masks_test = [m for _, m in prepared_test]
            preds, gts = _linear_probe(feats_train, masks_train,
                                       feats_test, masks_test, size_ctx, seed)
            _evaluate(preds, gts, f"dinov2_{size}", f"linear_{len(layers)}")
            if layers == (-1,):
                _knn_eval(feats_train, masks_train, feats_test, masks_test,
                          f"dinov2_{size}")

    bfe_train = [bfe(s) for s, _ in prepared_train]
    bfe_test = [bfe(s) for s, _ in prepared_test]
    masks_train = [m for _, m in prepared_train]
    masks_test = [m for _, m in prepared_test]
    preds, gts = _linear_probe(bfe_train, masks_train, bfe_test, masks_test, ctx, seed)
    _evaluate(preds, gts, "bfe", "linear_1")
    _knn_eval(bfe_train, masks_train, bfe_test, masks_test, "bfe")

    _write_csv(rows, out_dir / "probing.csv")
    return rows


def _nearest_multiple(value: int, base: int) -> int:
    return max(base, int(round(value / base)) * base)


def run_classification(
    catalog: DatasetCatalog,
    ctx: BenchContext,
    out_dir,
    k_grid: tuple[int, ...] = (1, 5, 10, 20, 50, 100, 200),
    resolutions: tuple[int, ...] = (56, 126, 224, 392, 560),
    n_images: int = 3000,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> list[dict]:
    """kNN rock-type classification accuracy over (k, resolution).

    Resolutions are snapped to the nearest multiple of the backbone patch so
    token grids stay integral.
    """
    from .neural import extract_cls_embedding

    samples = catalog.sample_ids("classification")
    if not samples:
        raise IngestError(f"no classification samples in catalog; {DATASET_HELP}")
    out_dir = Path(out_dir)

    items: list[tuple[SliceRef, int]] = []
    for label, sample_id in enumerate(sorted(samples)):
        for ref in list_slices(catalog[sample_id]):
            items.append((ref, label))
    rng = np.random.default_rng(seed)
    if len(items) > n_images:
        keep = sorted(rng.choice(len(items), n_images, replace=False))
        items = [items[i] for i in keep]
    train_items, test_items = train_test_split_images(items, train_fraction, seed)

    backbone, _ = _build_vit_backbone(ctx, (-1,), seed)
    patch = backbone.patch_size
    rows = []
    for resolution in resolutions:
        snapped = _nearest_multiple(resolution, patch)

        def _embed(ref: SliceRef) -> np.ndarray:
            slc, _ = load_from_ref(ref)
            resized = resize_bilinear(slc.pixels, (snapped, snapped))
            prepared = GraySlice(np.clip(resized, 0.0, 1.0), slc.sample_id,
                                 slc.slice_index)
            return extract_cls_embedding(backbone, prepared)

        train_emb = [( _embed(ref), label) for ref, label in train_items]
        test_emb = [_embed(ref) for ref, _ in test_items]
        test_labels = np.asarray([label for _, label in test_items])
        for k in k_grid:
            if k > len(train_emb):
                continue
            preds = knn_classify_images(train_emb, test_emb, KnnConfig(k=k))
            accuracy = float(np.mean(preds == test_labels))
            rows.append({"resolution": resolution, "snapped_resolution": snapped,
                         "k": k, "accuracy": accuracy})
    _write_csv(rows, out_dir / "classification.csv")
    return rows
