"""Dataset catalog, raw-file conversion, contrast adjustment and split policy.

Raw scans arrive as per-slice or multi-page TIFF (8/16-bit grayscale) or as
NPY stacks; :func:`convert` normalizes them into one float32 ``.npy`` file
per slice.  A :class:`DatasetCatalog` lists the converted samples, and
:func:`make_split` draws deterministic train/test splits from it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageSequence, UnidentifiedImageError

from .core import ClassPalette, GraySlice, LabelMask

__all__ = [
    "IngestError",
    "CatalogEntry",
    "DatasetCatalog",
    "SplitSpec",
    "SliceRef",
    "convert",
    "auto_contrast",
    "make_split",
    "train_test_split_images",
    "load_slice",
    "save_mask",
    "load_mask",
]

log = logging.getLogger(__name__)

CARBONATE_SAMPLES = ("S1", "S2", "S3")

# Fiji's documented default saturation for its automatic contrast adjustment.
DEFAULT_SATURATION = 0.0035


class IngestError(RuntimeError):
    """Raised when dataset files cannot be converted, listed or split."""


# ---------------------------------------------------------------------------
# conversion

_INT_RANGES = {
    np.dtype(np.uint8): 255.0,
    np.dtype(np.uint16): 65535.0,
    np.dtype(np.int32): 65535.0,  # PIL promotes 16-bit TIFF to I;32 sometimes
}


def _normalize_raw(arr: np.ndarray, source: str) -> np.ndarray:
    """Map raw integer intensities to float32 in [0, 1] by dtype range."""
    if np.issubdtype(arr.dtype, np.floating):
        out = arr.astype(np.float32)
        if not np.all(np.isfinite(out)):
            raise IngestError(f"{source}: non-finite float data")
        if out.size and (out.min() < 0.0 or out.max() > 1.0):
            raise IngestError(
                f"{source}: float data must already be in [0, 1], "
                f"got [{out.min():.4g}, {out.max():.4g}]"
            )
        return out
    denom = _INT_RANGES.get(arr.dtype)
    if denom is None:
        raise IngestError(f"{source}: unsupported dtype {arr.dtype}")
    return (arr.astype(np.float32) / denom).astype(np.float32)


def _read_raw_file(path: Path) -> list[np.ndarray]:
    """Return the list of 2D raw arrays stored in one TIFF or NPY file."""
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        with Image.open(path) as img:
            frames = []
            for frame in ImageSequence.Iterator(img):
                arr = np.asarray(frame)
                if arr.ndim == 3:  # RGB scan of a grayscale slice
                    arr = arr[..., 0]
                frames.append(arr)
            return frames
    if suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 2:
            return [arr]
        if arr.ndim == 3:
            return [arr[i] for i in range(arr.shape[0])]
        raise IngestError(f"{path.name}: expected 2D slice or 3D volume, got ndim={arr.ndim}")
    raise IngestError(f"{path.name}: unsupported file type")


def convert(raw_dir, out_dir) -> int:
    """Convert every readable TIFF/NPY slice in ``raw_dir`` to float32 NPY.

    Slices are ordered lexicographically by source filename (then page order
    within multi-page files) and written as ``slice_00000.npy`` etc.
    Unreadable files are skipped with a warning; zero readable slices is an
    error.  Returns the number of slices written.
    """
    raw_dir = Path(raw_dir)
    out_dir = Path(out_dir)
    if not raw_dir.is_dir():
        raise IngestError(f"raw directory not found: {raw_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    candidates = sorted(
        p for p in raw_dir.iterdir()
        if p.suffix.lower() in (".tif", ".tiff", ".npy")
    )
    written = 0
    bit_depths = set()
    sources = []
    for path in candidates:
        try:
            frames = _read_raw_file(path)
        except (OSError, ValueError, UnidentifiedImageError, IngestError) as exc:
            log.warning("skipping unreadable file %s: %s", path.name, exc)
            continue
        for raw in frames:
            normalized = _normalize_raw(raw, path.name)
            np.save(out_dir / f"slice_{written:05d}.npy", normalized)
            bit_depths.add(str(raw.dtype))
            written += 1
        sources.append(path.name)

    if written == 0:
        raise IngestError(f"no slices readable in {raw_dir}")

    manifest = {
        "n_slices": written,
        "source_files": sources,
        "raw_dtypes": sorted(bit_depths),
        "normalization": "value / dtype_max, stored float32",
    }
    (out_dir / "conversion_manifest.json").write_text(json.dumps(manifest, indent=2))
    return written


def auto_contrast(slc: GraySlice, saturation_fraction: float = DEFAULT_SATURATION) -> GraySlice:
    """Percentile-clip linear stretch of a slice to the full [0, 1] range.

    The lowest and highest ``saturation_fraction`` of the intensity
    distribution are clipped before rescaling.  A constant slice is returned
    unchanged.
    """
    if not 0.0 <= saturation_fraction < 0.5:
        raise ValueError(f"saturation_fraction must be in [0, 0.5), got {saturation_fraction}")
    px = slc.pixels
    lo = float(np.quantile(px, saturation_fraction))
    hi = float(np.quantile(px, 1.0 - saturation_fraction))
    if hi <= lo:
        return slc
    stretched = np.clip((px - lo) / (hi - lo), 0.0, 1.0)
    return GraySlice(stretched.astype(px.dtype, copy=False), slc.sample_id, slc.slice_index)


# ---------------------------------------------------------------------------
# catalog

_ROLES = ("classification", "segmentation")


@dataclass(frozen=True)
class CatalogEntry:
    sample_id: str
    role: str
    image_dir: Path
    gt_dir: Path | None
    palette: ClassPalette

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if self.role == "segmentation" and self.gt_dir is None:
            raise ValueError(f"segmentation sample {self.sample_id!r} needs a gt_dir")
        object.__setattr__(self, "image_dir", Path(self.image_dir))
        if self.gt_dir is not None:
            object.__setattr__(self, "gt_dir", Path(self.gt_dir))


@dataclass(frozen=True)
class DatasetCatalog:
    """Immutable listing of samples, their roles, data locations and palettes."""

    entries: tuple[CatalogEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [e.sample_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"sample ids must be unique, got {ids}")

    def __getitem__(self, sample_id: str) -> CatalogEntry:
        for e in self.entries:
            if e.sample_id == sample_id:
                return e
        raise KeyError(sample_id)

    def sample_ids(self, role: str | None = None) -> list[str]:
        return [e.sample_id for e in self.entries if role is None or e.role == role]

    def validate_carbonates(self) -> None:
        """Check that the segmentation samples are exactly S1, S2 and S3."""
        seg = tuple(sorted(self.sample_ids("segmentation")))
        if seg != CARBONATE_SAMPLES:
            raise ValueError(
                f"carbonates catalog must expose exactly {CARBONATE_SAMPLES}, got {seg}"
            )

    @classmethod
    def from_yaml(cls, path) -> "DatasetCatalog":
        raw = yaml.safe_load(Path(path).read_text())
        if not isinstance(raw, dict) or "samples" not in raw:
            raise IngestError(f"{path}: catalog file needs a top-level 'samples' list")
        root = Path(path).parent
        entries = []
        for item in raw["samples"]:
            palette = ClassPalette(
                names=tuple(item["palette"]["names"]),
                colors=tuple(tuple(c) for c in item["palette"]["colors"]),
            )
            gt = item.get("gt_dir")
            entries.append(CatalogEntry(
                sample_id=str(item["sample_id"]),
                role=str(item["role"]),
                image_dir=root / item["image_dir"],
                gt_dir=(root / gt) if gt else None,
                palette=palette,
            ))
        return cls(entries=tuple(entries))

    def to_yaml(self, path) -> None:
        root = Path(path).parent
        samples = []
        for e in self.entries:
            def rel(p: Path) -> str:
                try:
                    return str(p.relative_to(root))
                except ValueError:
                    return str(p)
            item = {
                "sample_id": e.sample_id,
                "role": e.role,
                "image_dir": rel(e.image_dir),
                "palette": {
                    "names": list(e.palette.names),
                    "colors": [list(c) for c in e.palette.colors],
                },
            }
            if e.gt_dir is not None:
                item["gt_dir"] = rel(e.gt_dir)
            samples.append(item)
        Path(path).write_text(yaml.safe_dump({"samples": samples}, sort_keys=False))


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SliceRef:
    """Pointer to one slice (and its ground truth, when present) on disk."""

    sample_id: str
    slice_index: int
    image_path: Path
    gt_path: Path | None


@dataclass(frozen=True)
class SplitSpec:
    train_samples: tuple[str, ...]
    test_samples: tuple[str, ...]
    n_train_images: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train_samples", tuple(self.train_samples))
        object.__setattr__(self, "test_samples", tuple(self.test_samples))
        if set(self.train_samples) & set(self.test_samples):
            raise ValueError("train and test sample sets must be disjoint")
        if self.n_train_images < 1:
            raise ValueError("n_train_images must be >= 1")


def list_slices(entry: CatalogEntry) -> list[SliceRef]:
    """All slices of one sample, ordered by filename, paired with GT by stem."""
    image_paths = sorted(entry.image_dir.glob("*.npy"))
    refs = []
    for i, p in enumerate(image_paths):
        gt_path = None
        if entry.gt_dir is not None:
            for ext in (".npy", ".png"):
                cand = entry.gt_dir / (p.stem + ext)
                if cand.exists():
                    gt_path = cand
                    break
            if gt_path is None:
                raise IngestError(f"no ground truth found for {p.name} in {entry.gt_dir}")
        refs.append(SliceRef(entry.sample_id, i, p, gt_path))
    return refs


def _per_sample_counts(n: int, k: int) -> list[int]:
    """Split n as evenly as possible over k samples, earlier samples first."""
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def make_split(catalog: DatasetCatalog, spec: SplitSpec) -> tuple[list[SliceRef], list[SliceRef]]:
    """Draw a deterministic train/test split of slices from the catalog.

    Training slices are sampled without replacement, as evenly as possible
    across ``spec.train_samples`` in their listed order (e.g. 4 images over
    two samples means 2 from each).  The test set is every slice of the test
    samples.  The same seed always yields the same lists.
    """
    rng = np.random.default_rng(spec.seed)
    counts = _per_sample_counts(spec.n_train_images, len(spec.train_samples))

    train: list[SliceRef] = []
    for sample_id, count in zip(spec.train_samples, counts):
        refs = list_slices(catalog[sample_id])
        if count > len(refs):
            raise IngestError(
                f"sample {sample_id}: requested {count} training slices "
                f"but only {len(refs)} available"
            )
        chosen = rng.choice(len(refs), size=count, replace=False)
        train.extend(refs[i] for i in sorted(chosen))

    test: list[SliceRef] = []
    for sample_id in spec.test_samples:
        test.extend(list_slices(catalog[sample_id]))
    return train, test


def train_test_split_images(items: list, train_fraction: float, seed: int) -> tuple[list, list]:
    """Image-level split used by the classification task (e.g. 80/20)."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    n_train = int(round(train_fraction * len(items)))
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])
    return [items[i] for i in train_idx], [items[i] for i in test_idx]


# ---------------------------------------------------------------------------
# slice / mask IO

def load_slice(path, sample_id: str = "", slice_index: int = 0) -> GraySlice:
    arr = np.load(Path(path))
    return GraySlice(arr, sample_id=sample_id, slice_index=slice_index)


def load_from_ref(ref: SliceRef, palette: ClassPalette | None = None):
    """Load (GraySlice, LabelMask | None) for one slice reference."""
    slc = load_slice(ref.image_path, ref.sample_id, ref.slice_index)
    mask = None
    if ref.gt_path is not None:
        if palette is None:
            raise ValueError("palette required to load ground-truth masks")
        mask = load_mask(ref.gt_path, palette)
    return slc, mask


def save_mask(mask: LabelMask, path) -> None:
    """Write a mask as NPY plus an indexed PNG colored by its palette."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), mask.labels.astype(np.uint8))
    img = Image.fromarray(mask.labels.astype(np.uint8), mode="P")
    flat = []
    for c in mask.palette.colors:
        flat.extend(c)
    img.putpalette(flat)
    img.save(path.with_suffix(".png"))


def load_mask(path, palette: ClassPalette) -> LabelMask:
    path = Path(path)
    if path.suffix == ".npy":
        labels = np.load(path)
    elif path.suffix == ".png":
        labels = np.asarray(Image.open(path)).astype(np.int64)
    else:
        raise IngestError(f"unsupported mask format: {path.suffix}")
    return LabelMask(labels.astype(np.int64), palette)
