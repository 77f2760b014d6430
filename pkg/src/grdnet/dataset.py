"""Dataset indexing and image loading.

Expected tree (one product category per root):

    root/train/good/*.png            defect-free training images
    root/test/<class>/*.png          test images, class "good" or a defect name
    root/ground_truth/<class>/*.png  pixel masks for defective test images

Regions of interest are optional and live in a parallel tree keyed by the
image filename stem: ``<roi_dir>/<split>/<class>/<stem>.png``, with a flat
``<roi_dir>/<stem>.png`` fallback shared across splits. Entries without a
ROI file load an all-ones ROI.

Images load as float32 in [0, 1] at the configured resolution (bilinear);
masks are binarized at 0.5 after resizing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
GOOD_LABEL = "good"

# raw mask values must sit near 0 or 255; anything in between is ambiguous
_BINARY_LOW = 32
_BINARY_HIGH = 223


class DatasetError(ValueError):
    """Raised for missing directories, undecodable files, or bad masks."""


@dataclass(frozen=True)
class IndexEntry:
    image_path: str
    roi_path: str | None
    mask_path: str | None
    label: str
    split: str

    @property
    def is_defect(self) -> bool:
        return self.label != GOOD_LABEL


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]
    split: str
    resolution: int
    channels: int

    def __len__(self) -> int:
        return len(self.entries)


def _list_images(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir()
             if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
    return sorted(files, key=lambda p: str(p))


def _verify_decodable(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except Exception as exc:
        raise DatasetError(f"undecodable image file {path}: {exc}") from exc


def _find_mask(root: Path, label: str, stem: str) -> str | None:
    gt_dir = root / "ground_truth" / label
    for candidate in (gt_dir / f"{stem}_mask.png", gt_dir / f"{stem}.png"):
        if candidate.is_file():
            return str(candidate)
    return None


def load_dataset(root: str | Path, split: str,
                 resolution: int = 256, channels: int = 3) -> DatasetIndex:
    """Index one split of a dataset tree in deterministic sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"split directory not found: {split_dir}")

    entries: list[IndexEntry] = []
    if split == "train":
        good_dir = split_dir / GOOD_LABEL
        if not good_dir.is_dir():
            raise DatasetError(f"missing train/{GOOD_LABEL} directory under {root}")
        images = _list_images(good_dir)
        if not images:
            raise DatasetError(f"no training images found under {good_dir}")
        for path in images:
            _verify_decodable(path)
            entries.append(IndexEntry(str(path), None, None, GOOD_LABEL, split))
    else:
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            label = class_dir.name
            for path in _list_images(class_dir):
                _verify_decodable(path)
                mask = None if label == GOOD_LABEL else _find_mask(root, label, path.stem)
                entries.append(IndexEntry(str(path), None, mask, label, split))
        if not entries:
            raise DatasetError(f"no images found under {split_dir}")
    return DatasetIndex(entries, split, resolution, channels)


def attach_rois(index: DatasetIndex, roi_dir: str | Path) -> DatasetIndex:
    """Point entries at ROI files where one exists; others stay all-ones.

    Lookup order per entry: mirrored tree path, then flat by stem.
    """
    roi_root = Path(roi_dir)
    if not roi_root.is_dir():
        raise DatasetError(f"ROI directory not found: {roi_root}")
    out = []
    for entry in index.entries:
        stem = Path(entry.image_path).stem
        roi_path = None
        candidates = [roi_root / entry.split / entry.label / f"{stem}{ext}"
                      for ext in IMAGE_EXTENSIONS]
        candidates += [roi_root / f"{stem}{ext}" for ext in IMAGE_EXTENSIONS]
        for cand in candidates:
            if cand.is_file():
                roi_path = str(cand)
                break
        out.append(replace(entry, roi_path=roi_path))
    return DatasetIndex(out, index.split, index.resolution, index.channels)


def split_train_val(index: DatasetIndex, fraction: float,
                    seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Hold out a validation share of the entries, fixed by seed."""
    n = len(index.entries)
    if fraction <= 0.0 or n < 2:
        return index, DatasetIndex([], index.split, index.resolution, index.channels)
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 101)))
    order = rng.permutation(n)
    val_ids = set(order[:n_val].tolist())
    train_entries = [e for i, e in enumerate(index.entries) if i not in val_ids]
    val_entries = [e for i, e in enumerate(index.entries) if i in val_ids]
    mk = lambda ents: DatasetIndex(ents, index.split, index.resolution, index.channels)
    return mk(train_entries), mk(val_entries)


def load_image(path: str | Path, resolution: int, channels: int) -> np.ndarray:
    """Decode, convert to the configured channel count, resize, scale to [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB" if channels == 3 else "L")
            img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"cannot load image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_mask(path: str | Path, resolution: int, strict: bool = False) -> np.ndarray:
    """Load a single-channel mask as float32 {0, 1} at the target resolution.

    ``strict`` rejects files whose raw values are not close to 0 or 255.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            raw = np.asarray(img)
            if strict:
                ambiguous = (raw > _BINARY_LOW) & (raw < _BINARY_HIGH)
                if ambiguous.any():
                    raise DatasetError(
                        f"mask {path} is not binarizable: "
                        f"{int(ambiguous.sum())} pixels far from both 0 and 255")
            img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"cannot load mask {path}: {exc}") from exc
    return (arr > 0.5).astype(np.float32)


def load_entry(entry: IndexEntry, resolution: int,
               channels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Materialize one entry as (image, roi, ground-truth mask) arrays."""
    image = load_image(entry.image_path, resolution, channels)
    if entry.roi_path is not None:
        roi = load_mask(entry.roi_path, resolution, strict=True)
    else:
        roi = np.ones((resolution, resolution), dtype=np.float32)
    if entry.mask_path is not None:
        gt = load_mask(entry.mask_path, resolution)
    else:
        gt = np.zeros((resolution, resolution), dtype=np.float32)
    return image, roi, gt


def augment(image: np.ndarray, roi: np.ndarray, gt: np.ndarray,
            seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate image and masks together by one random angle in [-90, 90] deg.

    Border fill is mirror reflection; bilinear interpolation everywhere,
    with masks re-binarized at 0.5 afterwards.
    """
    angle = float(np.random.default_rng(seed).uniform(-90.0, 90.0))

    def rot(arr: np.ndarray) -> np.ndarray:
        return ndimage.rotate(arr, angle, axes=(1, 0), reshape=False,
                              order=1, mode="reflect")

    image_r = np.clip(rot(image), 0.0, 1.0).astype(np.float32)
    roi_r = (rot(roi) > 0.5).astype(np.float32)
    gt_r = (rot(gt) > 0.5).astype(np.float32)
    return image_r, roi_r, gt_r


def index_to_csv(index: DatasetIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "roi_path", "gt_path", "label", "split"])
        for e in index.entries:
            writer.writerow([e.image_path, e.roi_path or "", e.mask_path or "",
                             e.label, e.split])


def index_from_csv(path: str | Path, resolution: int = 256,
                   channels: int = 3) -> DatasetIndex:
    entries = []
    split = ""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            entries.append(IndexEntry(row["path"], row["roi_path"] or None,
                                      row["gt_path"] or None, row["label"],
                                      row["split"]))
            split = row["split"]
    return DatasetIndex(entries, split, resolution, channels)
