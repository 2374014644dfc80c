import numpy as np
import pytest

from rockseg.core import CARBONATES_PALETTE, GraySlice, LabelMask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def palette3():
    return CARBONATES_PALETTE


def make_slice(pixels, sample_id="S1", slice_index=0):
    return GraySlice(np.asarray(pixels, dtype=np.float32), sample_id, slice_index)


def random_slice(rng, h=32, w=32, sample_id="S1", slice_index=0):
    return make_slice(rng.random((h, w), dtype=np.float64).astype(np.float32),
                      sample_id, slice_index)


def random_mask(rng, h, w, palette):
    labels = rng.integers(0, len(palette), size=(h, w))
    return LabelMask(labels.astype(np.int64), palette)


def three_phase_slice(rng, h=64, w=64, noise=0.02):
    """Synthetic carbonate-like slice: three blobby intensity phases + noise.

    Phases are spatially contiguous regions (thresholded smooth noise) with
    roughly 15/25/60 area split.  Class indices follow the carbonates palette
    (0 crude_oil dark, 1 brine mid, 2 rock_matrix bright).
    """
    from scipy import ndimage

    field = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=6.0)
    cuts = np.quantile(field, [0.15, 0.40])
    labels = np.digitize(field, cuts)
    base = np.take(np.array([0.15, 0.5, 0.85]), labels)
    pixels = np.clip(base + rng.normal(0, noise, size=(h, w)), 0.0, 1.0)
    return (
        make_slice(pixels.astype(np.float32)),
        LabelMask(labels.astype(np.int64), CARBONATES_PALETTE),
    )


@pytest.fixture
def synthetic_carbonates(tmp_path):
    """On-disk three-sample carbonates-style dataset with GT masks."""
    from rockseg.ingest import CatalogEntry, DatasetCatalog

    rng = np.random.default_rng(7)
    entries = []
    for sample_id in ("S1", "S2", "S3"):
        image_dir = tmp_path / sample_id / "images"
        gt_dir = tmp_path / sample_id / "gt"
        image_dir.mkdir(parents=True)
        gt_dir.mkdir(parents=True)
        for i in range(6):
            slc, mask = three_phase_slice(rng, h=64, w=64)
            np.save(image_dir / f"slice_{i:05d}.npy", slc.pixels)
            np.save(gt_dir / f"slice_{i:05d}.npy", mask.labels.astype(np.uint8))
        entries.append(CatalogEntry(
            sample_id=sample_id, role="segmentation",
            image_dir=image_dir, gt_dir=gt_dir, palette=CARBONATES_PALETTE,
        ))
    return DatasetCatalog(entries=tuple(entries))
