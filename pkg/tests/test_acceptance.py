"""Acceptance suite, group A: property/oracle checks with no datasets.

Each test covers one numbered criterion and prints a pass line on success
(run with ``pytest tests/test_acceptance.py -v -s`` to see them).  Group B
(paper-number reproduction on the public datasets) lives in
test_acceptance_group_b.py and self-skips without data.
"""

import numpy as np
import pytest
import torch
import torch.nn as nn

from rockseg.core import CARBONATES_PALETTE, GraySlice, LabelMask, confusion_matrix, iou
from rockseg.classical import fcm_1d, kmeans_1d, otsu_multiclass
from rockseg.preprocess import AugmentConfig, augment, bfe, nl_means
from rockseg.neural import (
    ConvHead,
    HeadSpec,
    LinearHead,
    LoraConfig,
    LoraLinear,
    UNet,
    apply_lora,
    build_stub_backbone,
    count_parameters,
    dequantize_blockwise,
    extract_features,
    merge_lora,
    quantize_blockwise,
)

from conftest import make_slice
from test_core import brute_force_counts
from test_preprocess import nl_means_naive


def passed(criterion: str, text: str) -> None:
    print(f"[PASS] {criterion}: {text}")


def test_a01_iou_confusion_oracle_equivalence():
    """1,000 random 8x8 3-class mask pairs vs a brute-force pixel loop."""
    rng = np.random.default_rng(101)
    for _ in range(1000):
        pred = LabelMask(rng.integers(0, 3, (8, 8)).astype(np.int64),
                         CARBONATES_PALETTE)
        gt = LabelMask(rng.integers(0, 3, (8, 8)).astype(np.int64),
                       CARBONATES_PALETTE)
        conf, tp, fp, fn = brute_force_counts(pred, gt, 3)
        assert np.array_equal(confusion_matrix(pred, gt), conf)
        report = iou(pred, gt)
        expected = []
        for c in range(3):
            if tp[c] + fp[c] + fn[c] > 0:
                expected.append(tp[c] / (tp[c] + fp[c] + fn[c]))
        assert report.mean_iou == np.mean(expected)
        for c, name in enumerate(CARBONATES_PALETTE.names):
            if tp[c] + fp[c] + fn[c] > 0:
                assert report.per_class_iou[name] == tp[c] / (tp[c] + fp[c] + fn[c])
    passed("A1", "IoU/confusion exactly match brute-force counts on 1000 pairs")


def exhaustive_otsu_pairs(values, n_bins=256):
    """Vectorized but exhaustive enumeration of all (t1, t2) threshold pairs."""
    counts, edges = np.histogram(values, bins=n_bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    cw = np.concatenate([[0.0], np.cumsum(counts)])
    cm = np.concatenate([[0.0], np.cumsum(counts * centers)])

    def stat(a, b):  # score of bins [a, b)
        c = cw[b] - cw[a]
        m = cm[b] - cm[a]
        return np.where(c > 0, m * m / np.where(c > 0, c, 1.0), 0.0)

    t1 = np.arange(1, n_bins)[:, None]
    t2 = np.arange(2, n_bins + 1)[None, :]
    total = stat(0, t1) + np.where(t1 < t2, stat(t1, t2), -np.inf) + stat(
        t2, n_bins)
    # t2 may not exceed the last interior edge
    total = np.where(t2 <= n_bins - 1, total, -np.inf)
    i, j = np.unravel_index(np.argmax(total), total.shape)
    return float(edges[t1[i, 0]]), float(edges[t2[0, j]])


def test_a02_otsu_exhaustive_threshold_match():
    """DP thresholds equal exhaustive pair enumeration on 100 random histograms."""
    rng = np.random.default_rng(202)
    for trial in range(100):
        mix = np.concatenate([
            rng.normal(rng.uniform(0.1, 0.4), rng.uniform(0.02, 0.1), 700),
            rng.normal(rng.uniform(0.45, 0.9), rng.uniform(0.02, 0.1), 600),
            rng.uniform(0, 1, 300),
        ])
        values = np.clip(mix, 0.0, 1.0)
        slc = make_slice(values.reshape(40, 40))
        thresholds, _ = otsu_multiclass(slc, 3, n_bins=256)
        assert thresholds.thresholds == exhaustive_otsu_pairs(values)
    passed("A2", "multiclass Otsu equals exhaustive pair search on 100 histograms")


def test_a03_kmeans_monotone_fcm_rowsums():
    """Lloyd SSE never increases; FCM rows stay stochastic, 50 pixel sets each."""
    rng = np.random.default_rng(303)
    for trial in range(50):
        values = rng.random(rng.integers(40, 200))
        _, _, sse = kmeans_1d(values, 3, seed=trial)
        assert all(b <= a + 1e-9 for a, b in zip(sse, sse[1:]))
        _, _, diag = fcm_1d(values, 3, m=2.0, seed=trial)
        assert all(err <= 1e-6 for err in diag["rowsum_max_err"])
    passed("A3", "K-means SSE monotone and FCM row sums within 1e-6 on 50 sets")


def test_a04_nl_means_naive_reference():
    """11x11 image: fast path equals the O(N^2) double-loop reference."""
    rng = np.random.default_rng(404)
    slc = make_slice(rng.random((11, 11)))
    out = nl_means(slc, patch_size=3, search_window=7, strength=0.15)
    ref = nl_means_naive(slc.pixels, 3, 7, 0.15)
    max_err = float(np.abs(out.pixels - ref).max())
    assert max_err < 1e-6
    passed("A4", f"NL-means matches naive reference (max |diff| = {max_err:.2e})")


def test_a05_bfe_shape_constants_equivariance():
    rng = np.random.default_rng(505)
    fm = bfe(make_slice(rng.random((48, 56))))
    assert fm.shape == (48, 56, 15)

    const = bfe(make_slice(np.full((64, 64), 0.3)))
    for s in range(5):
        assert np.abs(const.values[..., 3 * s + 1]).max() < 1e-7
        assert np.abs(const.values[..., 3 * s + 2]).max() < 1e-7

    base = rng.random((300, 300))
    dy, dx = 2, 4
    shifted = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
    fa = bfe(make_slice(base)).values
    fb = bfe(make_slice(shifted)).values
    margin = 140
    inner_a = fa[margin : 300 - margin, margin : 300 - margin]
    inner_b = fb[margin + dy : 300 - margin + dy, margin + dx : 300 - margin + dx]
    max_err = float(np.abs(inner_a - inner_b).max())
    assert max_err < 1e-6
    passed("A5", f"BFE shape/constant/equivariance hold (interior diff {max_err:.2e})")


def test_a06_augmentation_contract():
    rng = np.random.default_rng(606)
    pixels = rng.random((300, 300)).astype(np.float32)
    labels = rng.integers(0, 2, (300, 300)) * 2  # labels {0, 2} only
    slc = GraySlice(pixels, "S1", 0)
    mask = LabelMask(labels.astype(np.int64), CARBONATES_PALETTE)
    cfg = AugmentConfig(seed=99)

    a_slc, a_mask = augment(slc, mask, cfg)
    b_slc, b_mask = augment(slc, mask, cfg)
    assert np.array_equal(a_slc.pixels, b_slc.pixels)
    assert np.array_equal(a_mask.labels, b_mask.labels)
    assert a_slc.shape == (560, 560) and a_mask.shape == (560, 560)
    assert set(np.unique(a_mask.labels)) <= {0, 2}
    passed("A6", "augmentation deterministic, label-preserving, 224->560 = 560x560")


def test_a07_token_grid_arithmetic():
    stub = build_stub_backbone(embed_dim=48, depth=2, seed=7)
    rng = np.random.default_rng(707)
    grids = {}
    for s in (224, 448, 560):
        fm = extract_features(stub, make_slice(rng.random((s, s))))
        assert fm.shape[:2] == (s // 14, s // 14)
        grids[s] = fm.shape[:2]
    assert grids[560] == (40, 40)
    passed("A7", f"token grids {grids} match (S/14)^2; 560 -> 40x40")


def test_a08_lora_accounting_and_merge():
    layer = LoraLinear(nn.Linear(768, 768), LoraConfig(r=32))
    assert layer.added_parameters() == 49152

    torch.manual_seed(8)
    model = nn.Sequential(nn.Linear(64, 128), nn.Tanh(), nn.Linear(128, 32))
    apply_lora(model, LoraConfig(r=8))
    for m in model.modules():
        if isinstance(m, LoraLinear):
            nn.init.normal_(m.lora_b, std=0.05)
    model = model.double()
    merged = merge_lora(model)
    x = torch.randn(32, 64, dtype=torch.float64)
    with torch.no_grad():
        rel = ((model(x) - merged(x)).norm() / model(x).norm()).item()
    assert rel < 1e-5
    passed("A8", f"LoRA adds exactly 49152 params at r=32; merge rel err {rel:.2e}")


def test_a09_quantization_bound_oracle():
    rng = np.random.default_rng(909)
    w = torch.from_numpy(rng.normal(0, 1, (128, 64)).astype(np.float32))
    q = quantize_blockwise(w, 64)
    back = dequantize_blockwise(q).numpy().reshape(-1, 64)

    flat = w.numpy().reshape(-1, 64).astype(np.float64)
    worst = 0.0
    for b in range(flat.shape[0]):
        mn, mx = flat[b].min(), flat[b].max()
        scale = (mx - mn) / 15.0
        grid = mn + scale * np.arange(16)
        snapped = grid[np.round((flat[b] - mn) / scale).astype(int)]
        assert np.allclose(back[b], snapped, atol=1e-6)  # same grid, same codes
        err = np.abs(flat[b] - back[b]).max()
        assert err <= scale / 2 + 1e-6  # per-block affine rounding bound
        worst = max(worst, err / (scale / 2))

    zeros = torch.zeros(64, 37)
    assert torch.equal(dequantize_blockwise(quantize_blockwise(zeros, 64)), zeros)
    passed("A9", f"round-trip equals per-block grid oracle (worst err/bound {worst:.3f}); zeros exact")


def test_a10_linear_head_gradient_finite_differences():
    torch.manual_seed(10)
    head = LinearHead(HeadSpec(kind="linear", in_dim=8, n_classes=3,
                               output_size=4)).double()
    feats = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    target = torch.randint(0, 3, (1, 4, 4))
    criterion = nn.CrossEntropyLoss()
    criterion(head(feats), target).backward()

    eps = 1e-6
    checked = 0
    for param in (head.proj.weight, head.proj.bias):
        grad = param.grad.view(-1)
        flat = param.data.view(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            with torch.no_grad():
                up = criterion(head(feats), target).item()
            flat[idx] = orig - eps
            with torch.no_grad():
                down = criterion(head(feats), target).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grad[idx].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / denom < 1e-4
            checked += 1
    passed("A10", f"linear-head gradient matches central differences ({checked} params)")


def test_a11_head_and_unet_shapes_and_params():
    conv_head = ConvHead(HeadSpec(kind="conv", in_dim=12, n_classes=3))
    conv_head.eval()
    with torch.no_grad():
        out = conv_head(torch.randn(1, 12, 40, 40))
    assert out.shape == (1, 3, 560, 560)

    small = UNet(1, 3, base_channels=32)
    large = UNet(1, 3, base_channels=64)
    n_small, n_large = count_parameters(small), count_parameters(large)
    assert abs(n_small - 7.8e6) / 7.8e6 < 0.10
    assert abs(n_large - 31.3e6) / 31.3e6 < 0.10
    small.eval()
    with torch.no_grad():
        out = small(torch.randn(1, 1, 560, 560))
    assert out.shape == (1, 3, 560, 560)
    passed("A11",
           f"ConvHead/UNet emit 560x560x3; UNet params {n_small/1e6:.2f}M / {n_large/1e6:.2f}M")


def test_a12_sweep_smoke_with_constant_mock(synthetic_carbonates, tmp_path):
    from rockseg.bench import BenchContext, SweepSpec, run_sweep
    from rockseg.ingest import list_slices, load_from_ref

    ctx = BenchContext(palette=CARBONATES_PALETTE, denoise_classical=False,
                       crop_size=56, upsample_size=56)
    spec = SweepSpec(methods=("constant",), n_train_grid=(2, 4), n_seeds=2)
    rows = run_sweep(spec, synthetic_carbonates, ctx, tmp_path)
    assert (tmp_path / "results.csv").exists()
    assert (tmp_path / "iou_vs_n_train.png").exists()

    test_pairs = [load_from_ref(r, CARBONATES_PALETTE)
                  for r in list_slices(synthetic_carbonates["S3"])]
    counts = np.zeros(3, dtype=np.int64)
    for _, mask in test_pairs:
        counts += np.bincount(mask.labels.ravel(), minlength=3)
    majority = int(np.argmax(counts))
    present = set(np.flatnonzero(counts)) | {majority}
    per_class = [counts[majority] / counts.sum() if c == majority else 0.0
                 for c in sorted(present)]
    analytic = float(np.mean(per_class))
    for row in rows:
        assert row["mean_iou"] == pytest.approx(analytic, abs=1e-12)
    passed("A12", f"constant-mock sweep completed; mean IoU == analytic {analytic:.4f}")
