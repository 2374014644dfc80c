"""Command-line entry point for the full pipeline.

Subcommands: convert, preprocess, segment, extract, probe, finetune,
evaluate, sweep, visualize.  One YAML config file plus dotted ``--set``
overrides drive every run; the resolved configuration is echoed next to the
outputs so any run can be reproduced byte for byte (same data, seeds and
versions).  Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import CARBONATES_PALETTE, ClassPalette, EvalReport, iou
from .ingest import (
    DatasetCatalog,
    IngestError,
    load_mask,
    load_slice,
    save_mask,
)

log = logging.getLogger("rockseg")


class ConfigError(ValueError):
    """Bad configuration or argument combination (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


# ---------------------------------------------------------------------------
# config handling

DEFAULT_CONFIG = {
    "catalog": None,
    "out_dir": "out",
    "device": "cpu",
    "palette": "carbonates",
    "backbone": {"size": "base", "checkpoints": {}, "checkpoint_hashes": {},
                 "stub_dim": None, "stub_depth": 2},
    "classical": {"denoise": True, "n_bins": 256, "fcm_m": 2.0},
    "preprocess": {"bfe_scales": [1.0, 2.0, 4.0, 8.0, 16.0],
                   "nlm_patch_size": 5, "nlm_search_window": 21,
                   "nlm_strength": None},
    "train": {"epochs": 20, "batch_size": 15, "lr": 1e-4, "lora_r": 32,
              "quant": True, "crop_size": 224, "upsample_size": 560},
    "augment": {"flip_h_prob": 0.5, "flip_v_prob": 0.5,
                "contrast_range": [0.9, 1.1], "brightness_range": [0.9, 1.1],
                "gamma_range": [0.9, 1.1]},
    "probe": {"k": 50, "resolution": 128, "n_train": 200, "n_test": 100,
              "epochs": 10},
    "sweep": {"methods": ["rf_bfe", "unet_small", "dinov2_conv_ft"],
              "n_train_grid": [4, 10, 20, 50, 100, 200, 500, 1000, 1200],
              "n_seeds": 5, "test_sample": "S3", "base_seed": 0},
}


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _apply_override(config: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {part!r} in override {item!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        unknown = set(loaded) - set(config)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        _deep_update(config, loaded)
    for item in overrides:
        _apply_override(config, item)
    return config


def _resolve_palette(config: dict) -> ClassPalette:
    value = config["palette"]
    if value == "carbonates":
        return CARBONATES_PALETTE
    if isinstance(value, dict):
        return ClassPalette(names=tuple(value["names"]),
                            colors=tuple(tuple(c) for c in value["colors"]))
    raise ConfigError(f"palette must be 'carbonates' or a names/colors mapping, got {value!r}")


def _resolve_catalog(config: dict) -> DatasetCatalog:
    if not config.get("catalog"):
        raise ConfigError("this command needs config key 'catalog' (path to catalog YAML)")
    return DatasetCatalog.from_yaml(config["catalog"])


def _build_context(config: dict):
    from .bench import BenchContext

    b, t, p = config["backbone"], config["train"], config["probe"]
    pre, aug = config["preprocess"], config["augment"]
    return BenchContext(
        palette=_resolve_palette(config),
        device=config["device"],
        checkpoints=dict(b.get("checkpoints") or {}),
        checkpoint_hashes=dict(b.get("checkpoint_hashes") or {}),
        backbone_size=b["size"],
        backbone_stub_dim=b.get("stub_dim"),
        backbone_stub_depth=b.get("stub_depth", 2),
        denoise_classical=config["classical"]["denoise"],
        nlm_patch_size=pre["nlm_patch_size"],
        nlm_search_window=pre["nlm_search_window"],
        nlm_strength=pre["nlm_strength"],
        bfe_scales=tuple(pre["bfe_scales"]),
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        lora_r=t["lora_r"],
        quant_enabled=bool(t["quant"]),
        crop_size=t["crop_size"],
        upsample_size=t["upsample_size"],
        flip_h_prob=aug["flip_h_prob"],
        flip_v_prob=aug["flip_v_prob"],
        contrast_range=tuple(aug["contrast_range"]),
        brightness_range=tuple(aug["brightness_range"]),
        gamma_range=tuple(aug["gamma_range"]),
        knn_k=p["k"],
        probe_resolution=p["resolution"],
        probe_n_train=p["n_train"],
        probe_n_test=p["n_test"],
        probe_epochs=p["epochs"],
    )


def _echo_config(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.yaml").write_text(
        yaml.safe_dump({"version": __version__, **config}, sort_keys=False)
    )


# ---------------------------------------------------------------------------
# subcommand handlers

def _cmd_convert(args, config) -> int:
    from .ingest import convert

    count = convert(args.input, args.output)
    print(f"wrote {count} slices to {args.output}")
    return 0


def _cmd_preprocess(args, config) -> int:
    from .preprocess import BfeConfig, bfe, nl_means

    pre = config["preprocess"]
    bfe_cfg = BfeConfig(scales=tuple(pre["bfe_scales"]))
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(args.input).glob("*.npy"))
    if not paths:
        raise IngestError(f"no slices in {args.input}")
    for i, path in enumerate(paths):
        slc = load_slice(path, slice_index=i)
        if args.denoise:
            slc = nl_means(slc, patch_size=pre["nlm_patch_size"],
                           search_window=pre["nlm_search_window"],
                           strength=pre["nlm_strength"])
            np.save(out_dir / path.name, slc.pixels)
        if args.bfe:
            fm = bfe(slc, bfe_cfg)
            np.save(out_dir / f"{path.stem}_bfe.npy", fm.values)
    _echo_config(config, out_dir)
    print(f"preprocessed {len(paths)} slices into {out_dir}")
    return 0


def _cmd_segment(args, config) -> int:
    from .classical import fcm_segment, kmeans_segment, otsu_multiclass

    out_dir = Path(args.output) if args.output else Path(config["out_dir"]) / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(args.input).glob("*.npy"))
    if not paths:
        raise IngestError(f"no slices in {args.input}")

    denoise = config["classical"]["denoise"] and not args.no_denoise
    run_info = {"method": args.method, "n_classes": args.classes,
                "denoise": denoise, "seed": args.seed, "per_slice": []}
    palette = None
    if args.classes == len(_resolve_palette(config)):
        palette = _resolve_palette(config)

    for i, path in enumerate(paths):
        slc = load_slice(path, slice_index=i)
        if denoise:
            from .preprocess import nl_means

            pre = config["preprocess"]
            slc = nl_means(slc, patch_size=pre["nlm_patch_size"],
                           search_window=pre["nlm_search_window"],
                           strength=pre["nlm_strength"])
        if args.method == "otsu":
            thresholds, mask = otsu_multiclass(slc, args.classes, palette=palette)
            run_info["per_slice"].append(
                {"slice": path.name, "thresholds": list(thresholds.thresholds)})
        elif args.method == "kmeans":
            mask = kmeans_segment(slc, args.classes, args.seed, palette=palette)
            run_info["per_slice"].append({"slice": path.name})
        else:
            state, mask = fcm_segment(slc, args.classes,
                                      m=config["classical"]["fcm_m"],
                                      seed=args.seed, palette=palette)
            run_info["per_slice"].append(
                {"slice": path.name, "centers": state.centers.tolist()})
        save_mask(mask, out_dir / path.stem)

        if args.gt:
            gt = load_mask(Path(args.gt) / path.name, mask.palette)
            report = iou(mask, gt, method_name=args.method, seed=args.seed)
            run_info["per_slice"][-1]["mean_iou"] = report.mean_iou

    (out_dir / "report.json").write_text(json.dumps(run_info, indent=2))
    _echo_config(config, out_dir)
    print(f"segmented {len(paths)} slices with {args.method} into {out_dir}")
    return 0


def _cmd_extract(args, config) -> int:
    from .bench import BenchContext, _build_vit_backbone  # shared stub logic

    ctx = _build_context(config)
    layers = (-4, -3, -2, -1) if args.layers == "last4" else (-1,)
    backbone, _ = _build_vit_backbone(ctx, layers, seed=0)

    from .neural import extract_features

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(args.input).glob("*.npy"))
    if not paths:
        raise IngestError(f"no slices in {args.input}")
    for i, path in enumerate(paths):
        slc = load_slice(path, slice_index=i)
        fm = extract_features(backbone, slc, layers)
        np.save(out_dir / f"{path.stem}_features.npy", fm.values)
    _echo_config(config, out_dir)
    print(f"extracted {len(paths)} feature maps into {out_dir}")
    return 0


def _cmd_probe(args, config) -> int:
    from .bench import run_classification, run_probing

    catalog = _resolve_catalog(config)
    ctx = _build_context(config)
    out_dir = Path(config["out_dir"])
    if args.task == "segmentation":
        rows = run_probing(catalog, ctx, out_dir,
                           backbone_sizes=(config["backbone"]["size"],))
    else:
        rows = run_classification(catalog, ctx, out_dir)
    _echo_config(config, out_dir)
    for row in rows:
        print(row)
    return 0


def _cmd_finetune(args, config) -> int:
    from .bench import run_single

    if args.quant not in ("4bit", "none"):
        raise ConfigError(f"--quant must be '4bit' or 'none', got {args.quant!r}")
    config["backbone"]["size"] = args.backbone
    config["train"]["lora_r"] = args.lora_r
    config["train"]["quant"] = args.quant == "4bit"
    catalog = _resolve_catalog(config)
    ctx = _build_context(config)
    method = f"dinov2_{args.head}_ft"
    out_dir = Path(config["out_dir"])
    record = run_single(method, catalog, ctx, n_train=args.n_train,
                        seed=args.seed, test_sample=args.test_sample,
                        out_dir=out_dir)
    _echo_config(config, out_dir)
    print(f"{method}: mean IoU {record.report.mean_iou:.4f} "
          f"({record.wall_clock:.1f}s, runs/{record.config_hash})")
    return 0


def _cmd_evaluate(args, config) -> int:
    palette = _resolve_palette(config)
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_paths = sorted(pred_dir.glob("*.npy"))
    if not pred_paths:
        raise IngestError(f"no predicted masks in {pred_dir}")
    from .core import confusion_matrix, report_from_confusion

    total = np.zeros((len(palette), len(palette)), dtype=np.int64)
    for path in pred_paths:
        pred = load_mask(path, palette)
        gt = load_mask(gt_dir / path.name, palette)
        total += confusion_matrix(pred, gt)
    report = report_from_confusion(total, palette.names, method_name="evaluate")
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    _echo_config(config, out_dir)
    print(f"mean IoU {report.mean_iou:.4f} over {len(pred_paths)} masks")
    return 0


def _cmd_sweep(args, config) -> int:
    from .bench import SweepSpec, run_sweep

    catalog = _resolve_catalog(config)
    ctx = _build_context(config)
    s = config["sweep"]
    spec = SweepSpec(methods=tuple(s["methods"]),
                     n_train_grid=tuple(s["n_train_grid"]),
                     n_seeds=s["n_seeds"], test_sample=s["test_sample"],
                     base_seed=s["base_seed"])
    out_dir = Path(config["out_dir"])
    rows = run_sweep(spec, catalog, ctx, out_dir)
    _echo_config(config, out_dir)
    print(f"wrote {out_dir / 'results.csv'} ({len(rows)} aggregated cells)")
    return 0


def _cmd_visualize(args, config) -> int:
    from .interpret import (
        EmbeddingSet,
        mask_gallery,
        pca_rgb,
        plot_embedding_scatter,
        render_confusion,
        save_figure,
        tsne_embed,
        coords_to_csv,
    )
    from .preprocess import FeatureMap

    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.kind == "confusion":
        report = EvalReport.load(args.input)
        fig = render_confusion(report, normalize="row")
        save_figure(fig, out_dir / "confusion")
    elif args.kind == "pca":
        values = np.load(args.input)
        view = pca_rgb(FeatureMap(values, extractor="file"))
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots()
        ax.imshow(view.projected)
        ax.set_axis_off()
        save_figure(fig, out_dir / "pca_rgb")
    elif args.kind == "tsne":
        vectors = np.load(args.input)
        labels = Path(args.labels).read_text().splitlines() if args.labels else [
            str(i) for i in range(len(vectors))
        ]
        emb = EmbeddingSet(vectors=vectors, labels=tuple(labels))
        perplexity = min(30.0, (len(labels) - 1) / 3.5)
        coords = tsne_embed(emb, perplexity=perplexity, seed=0)
        coords_to_csv(coords, labels, out_dir / "tsne.csv")
        save_figure(plot_embedding_scatter(coords, labels), out_dir / "tsne")
    else:
        raise ConfigError(f"unknown visualize kind {args.kind!r}")
    _echo_config(config, out_dir)
    print(f"figure written under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> _Parser:
    parser = _Parser(prog="rockseg", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="YAML config file (see README)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=5")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="raw TIFF/NPY volume -> per-slice NPY",
                       description="Convert raw scans to normalized per-slice NPY. Honors no config keys.")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=_cmd_convert)

    p = sub.add_parser("preprocess",
                       help="denoise slices and/or emit 15-channel features",
                       description="Denoise slices and/or emit 15-channel features. "
                                   "Honors config keys: preprocess.bfe_scales, "
                                   "preprocess.nlm_patch_size, preprocess.nlm_search_window, "
                                   "preprocess.nlm_strength.")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--denoise", action="store_true")
    p.add_argument("--bfe", action="store_true")
    p.set_defaults(handler=_cmd_preprocess)

    p = sub.add_parser("segment",
                       help="training-free segmentation (Otsu, K-means, FCM)",
                       description="Training-free segmentation. Honors config keys: "
                                   "classical.denoise, classical.fcm_m, palette, "
                                   "preprocess.nlm_patch_size, preprocess.nlm_search_window, "
                                   "preprocess.nlm_strength.")
    p.add_argument("--method", required=True, choices=("otsu", "kmeans", "fcm"))
    p.add_argument("--input", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--output", help="mask dir (default: <out_dir>/masks)")
    p.add_argument("--gt", help="optional ground-truth mask dir for IoU")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-denoise", action="store_true")
    p.set_defaults(handler=_cmd_segment)

    p = sub.add_parser("extract",
                       help="backbone patch features per slice",
                       description="Extract backbone patch features per slice. Honors config "
                                   "keys: backbone.size, backbone.checkpoints, "
                                   "backbone.stub_dim, backbone.stub_depth.")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--layers", choices=("last", "last4"), default="last")
    p.set_defaults(handler=_cmd_extract)

    p = sub.add_parser("probe",
                       help="probing benchmarks",
                       description="Probing benchmarks. Honors config keys: catalog, palette, "
                                   "device, probe.k, probe.resolution, probe.n_train, "
                                   "probe.n_test, probe.epochs, backbone.size, "
                                   "backbone.checkpoints, backbone.stub_dim.")
    p.add_argument("--task", choices=("segmentation", "classification"),
                   default="segmentation")
    p.set_defaults(handler=_cmd_probe)

    p = sub.add_parser("finetune",
                       help="LoRA fine-tuning run",
                       description="LoRA fine-tuning run. Honors config keys: catalog, palette, "
                                   "device, train.epochs, train.batch_size, train.lr, "
                                   "train.lora_r, train.quant, train.crop_size, "
                                   "train.upsample_size, backbone.checkpoints, backbone.stub_dim.")
    p.add_argument("--backbone", choices=("small", "base", "large"), default="base")
    p.add_argument("--head", choices=("linear", "conv"), default="conv")
    p.add_argument("--lora-r", type=int, default=32)
    p.add_argument("--quant", default="4bit", help="'4bit' or 'none'")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-sample", default="S3")
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("evaluate", help="IoU of predicted masks vs ground truth",
                       description="IoU of predicted masks vs ground truth. Honors config keys: palette, out_dir.")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("sweep", help="data-regime sweep",
                       description="Data-regime sweep. Honors config keys: catalog, palette, device, "
                                   "sweep.methods, sweep.n_train_grid, sweep.n_seeds, "
                                   "sweep.test_sample, sweep.base_seed, train.*, augment.*, "
                                   "backbone.*, classical.denoise, preprocess.*, probe.*.")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("visualize",
                       help="emit figures: confusion | pca | tsne",
                       description="Emit figures. Honors config keys: out_dir, palette.")
    p.add_argument("--kind", required=True, choices=("confusion", "pca", "tsne"))
    p.add_argument("--input", required=True,
                   help="report.json (confusion), features npy (pca), embeddings npy (tsne)")
    p.add_argument("--labels", help="label file for tsne (one per line)")
    p.set_defaults(handler=_cmd_visualize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse error or --help
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.set)
        return args.handler(args, config)
    except (ConfigError, KeyError, IngestError, FileNotFoundError) as exc:
        # bad key, missing dataset, invalid combination
        _emit_error("config", str(exc))
        return 2
    except ValueError as exc:
        _emit_error("runtime", str(exc))
        return 1
    except Exception as exc:  # unexpected
        log.exception("unhandled failure")
        _emit_error("internal", f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
