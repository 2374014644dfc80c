import numpy as np
import pytest
from PIL import Image

from rockseg.core import CARBONATES_PALETTE, LabelMask
from rockseg.ingest import (
    CatalogEntry,
    DatasetCatalog,
    IngestError,
    SplitSpec,
    auto_contrast,
    convert,
    list_slices,
    load_mask,
    load_slice,
    make_split,
    save_mask,
    train_test_split_images,
)

from conftest import make_slice


class TestConvert:
    def test_three_tiffs(self, tmp_path, rng):
        raw = tmp_path / "raw"
        raw.mkdir()
        for i in range(3):
            arr = (rng.random((16, 16)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(raw / f"s{i}.tif")
        count = convert(raw, tmp_path / "out")
        assert count == 3
        assert len(list((tmp_path / "out").glob("slice_*.npy"))) == 3

    def test_empty_dir_fails(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        with pytest.raises(IngestError, match="no slices"):
            convert(raw, tmp_path / "out")

    def test_16bit_normalization(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        arr = np.zeros((8, 8), dtype=np.uint16)
        arr[0, 0] = 65535
        Image.fromarray(arr).save(raw / "a.tif")
        convert(raw, tmp_path / "out")
        out = np.load(tmp_path / "out" / "slice_00000.npy")
        assert out.max() == pytest.approx(1.0)
        assert out.dtype == np.float32

    def test_unreadable_file_skipped(self, tmp_path, caplog):
        raw = tmp_path / "raw"
        raw.mkdir()
        (raw / "broken.tif").write_bytes(b"not a tiff at all")
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(raw / "ok.tif")
        assert convert(raw, tmp_path / "out") == 1

    def test_npy_volume_splits_into_slices(self, tmp_path, rng):
        raw = tmp_path / "raw"
        raw.mkdir()
        np.save(raw / "vol.npy", rng.random((4, 8, 8)).astype(np.float32))
        assert convert(raw, tmp_path / "out") == 4

    def test_roundtrip_exact(self, tmp_path, rng):
        raw = tmp_path / "raw"
        raw.mkdir()
        arr = (rng.random((12, 12)) * 65535).astype(np.uint16)
        Image.fromarray(arr).save(raw / "a.tif")
        convert(raw, tmp_path / "out")
        loaded = np.load(tmp_path / "out" / "slice_00000.npy")
        expected = (arr.astype(np.float32) / 65535.0).astype(np.float32)
        assert np.array_equal(loaded, expected)

    def test_multipage_tiff_ordering(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        frames = [Image.fromarray(np.full((4, 4), v, dtype=np.uint8))
                  for v in (10, 20)]
        frames[0].save(raw / "stack.tif", save_all=True, append_images=frames[1:])
        convert(raw, tmp_path / "out")
        first = np.load(tmp_path / "out" / "slice_00000.npy")
        second = np.load(tmp_path / "out" / "slice_00001.npy")
        assert first[0, 0] < second[0, 0]


class TestAutoContrast:
    def test_full_range_unchanged_at_zero_fraction(self):
        slc = make_slice(np.linspace(0, 1, 64).reshape(8, 8))
        out = auto_contrast(slc, 0.0)
        assert np.allclose(out.pixels, slc.pixels, atol=1e-7)

    def test_constant_unchanged(self):
        slc = make_slice(np.full((8, 8), 0.4))
        out = auto_contrast(slc, 0.01)
        assert np.array_equal(out.pixels, slc.pixels)

    def test_percentile_oracle_on_ramp(self):
        ramp = (np.arange(256, dtype=np.float64) / 255.0).reshape(16, 16)
        slc = make_slice(ramp)
        frac = 0.01
        out = auto_contrast(slc, frac)
        lo = np.quantile(ramp, frac)
        hi = np.quantile(ramp, 1 - frac)
        expected = np.clip((ramp - lo) / (hi - lo), 0, 1)
        assert np.allclose(out.pixels, expected, atol=1e-6)
        # the clipped percentiles map to the range ends
        assert out.pixels.min() == 0.0 and out.pixels.max() == 1.0

    def test_idempotent_on_stretched(self):
        slc = make_slice(np.linspace(0, 1, 100).reshape(10, 10))
        once = auto_contrast(slc, 0.0)
        twice = auto_contrast(once, 0.0)
        assert np.allclose(once.pixels, twice.pixels, atol=1e-7)

    def test_invalid_fraction(self):
        slc = make_slice(np.linspace(0, 1, 16).reshape(4, 4))
        with pytest.raises(ValueError):
            auto_contrast(slc, 0.5)


class TestCatalog:
    def test_unique_ids_enforced(self, tmp_path):
        entry = CatalogEntry("S1", "segmentation", tmp_path, tmp_path,
                             CARBONATES_PALETTE)
        with pytest.raises(ValueError, match="unique"):
            DatasetCatalog(entries=(entry, entry))

    def test_segmentation_needs_gt(self, tmp_path):
        with pytest.raises(ValueError, match="gt_dir"):
            CatalogEntry("S1", "segmentation", tmp_path, None, CARBONATES_PALETTE)

    def test_carbonates_validation(self, synthetic_carbonates):
        synthetic_carbonates.validate_carbonates()

    def test_carbonates_validation_fails_on_missing(self, synthetic_carbonates):
        partial = DatasetCatalog(entries=synthetic_carbonates.entries[:2])
        with pytest.raises(ValueError, match="S1"):
            partial.validate_carbonates()

    def test_yaml_roundtrip(self, synthetic_carbonates, tmp_path):
        path = tmp_path / "catalog.yaml"
        synthetic_carbonates.to_yaml(path)
        loaded = DatasetCatalog.from_yaml(path)
        assert loaded.sample_ids() == ["S1", "S2", "S3"]
        assert loaded["S2"].palette.names == CARBONATES_PALETTE.names
        assert loaded["S2"].gt_dir is not None


class TestSplits:
    def test_disjointness_enforced(self):
        with pytest.raises(ValueError, match="disjoint"):
            SplitSpec(("S1",), ("S1",), 2, 0)

    def test_even_draw_4_over_two_samples(self, synthetic_carbonates):
        spec = SplitSpec(("S1", "S2"), ("S3",), 4, seed=0)
        train, test = make_split(synthetic_carbonates, spec)
        per_sample = {s: sum(r.sample_id == s for r in train) for s in ("S1", "S2")}
        assert per_sample == {"S1": 2, "S2": 2}
        assert all(r.sample_id == "S3" for r in test)

    def test_odd_count_ceil_floor(self, synthetic_carbonates):
        spec = SplitSpec(("S1", "S2"), ("S3",), 5, seed=0)
        train, _ = make_split(synthetic_carbonates, spec)
        assert sum(r.sample_id == "S1" for r in train) == 3
        assert sum(r.sample_id == "S2" for r in train) == 2

    def test_deterministic_under_seed(self, synthetic_carbonates):
        spec = SplitSpec(("S1", "S2"), ("S3",), 4, seed=11)
        a = make_split(synthetic_carbonates, spec)
        b = make_split(synthetic_carbonates, spec)
        assert a == b

    def test_different_seed_changes_draw(self, synthetic_carbonates):
        a, _ = make_split(synthetic_carbonates, SplitSpec(("S1", "S2"), ("S3",), 4, 0))
        b, _ = make_split(synthetic_carbonates, SplitSpec(("S1", "S2"), ("S3",), 4, 1))
        assert a != b  # 6 choose 2 per sample; collision would be rare

    def test_oversubscription_fails_with_counts(self, synthetic_carbonates):
        spec = SplitSpec(("S1", "S2"), ("S3",), 100, seed=0)
        with pytest.raises(IngestError, match="available"):
            make_split(synthetic_carbonates, spec)

    def test_no_shared_slices(self, synthetic_carbonates):
        spec = SplitSpec(("S1", "S2"), ("S3",), 8, seed=3)
        train, test = make_split(synthetic_carbonates, spec)
        train_keys = {(r.sample_id, r.slice_index) for r in train}
        test_keys = {(r.sample_id, r.slice_index) for r in test}
        assert not train_keys & test_keys

    def test_image_level_split(self):
        items = list(range(100))
        train, test = train_test_split_images(items, 0.8, seed=0)
        assert len(train) == 80 and len(test) == 20
        assert not set(train) & set(test)
        again = train_test_split_images(items, 0.8, seed=0)
        assert (train, test) == again


class TestMaskIO:
    def test_png_npy_roundtrip(self, tmp_path, rng, palette3):
        labels = rng.integers(0, 3, (16, 16)).astype(np.int64)
        mask = LabelMask(labels, palette3)
        save_mask(mask, tmp_path / "m")
        for ext in (".npy", ".png"):
            loaded = load_mask((tmp_path / "m").with_suffix(ext), palette3)
            assert np.array_equal(loaded.labels, labels)

    def test_list_slices_pairs_gt(self, synthetic_carbonates):
        refs = list_slices(synthetic_carbonates["S1"])
        assert len(refs) == 6
        assert all(r.gt_path is not None for r in refs)

    def test_list_slices_missing_gt_fails(self, tmp_path, rng):
        image_dir = tmp_path / "img"
        gt_dir = tmp_path / "gt"
        image_dir.mkdir(), gt_dir.mkdir()
        np.save(image_dir / "a.npy", rng.random((4, 4)).astype(np.float32))
        entry = CatalogEntry("X", "segmentation", image_dir, gt_dir,
                             CARBONATES_PALETTE)
        with pytest.raises(IngestError, match="ground truth"):
            list_slices(entry)
