"""Component crops, stratified splits and dataset manifests."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, GeometryError, ManifestVersionError
from .geometry import (
    CLASSES,
    AnnotatedImageRecord,
    Annotation,
    AxisAlignedSquare,
    circumscribe_square,
    fit_square_to_image,
    min_area_obb,
)
from .io import atomic_write_text

logger = logging.getLogger(__name__)

CROP_SIZE = 500
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

ImageLoader = Callable[[str], np.ndarray]


@dataclass
class ComponentCrop:
    crop_id: str
    pixels: np.ndarray
    class_label: str
    source: tuple[str, int, str]  # (image_id, annotation_index, face)
    split: str | None = None

    def __post_init__(self):
        if self.pixels.shape != (CROP_SIZE, CROP_SIZE, 3) or self.pixels.dtype != np.uint8:
            raise DataError(f"{self.crop_id}: crop must be {CROP_SIZE}x{CROP_SIZE}x3 uint8, "
                            f"got {self.pixels.shape} {self.pixels.dtype}")


def crop_id_for(image_id: str, annotation_index: int) -> str:
    return f"{image_id}:{annotation_index}"


def crop_filename(crop_id: str) -> str:
    return crop_id.replace(":", "_") + ".png"


def load_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load image {path}: {exc}") from None


# -- extraction ----------------------------------------------------------------

def pixel_window(annotation: Annotation, width: int, height: int):
    """Integer crop square for one annotation, fitted to the image.

    Returns (square, padding) where the square is in whole pixels.
    """
    sq = circumscribe_square(min_area_obb(annotation.polygon))
    side = max(1, math.ceil(sq.side - 1e-9))
    cx, cy = sq.min_x + sq.side / 2, sq.min_y + sq.side / 2
    snapped = AxisAlignedSquare(float(round(cx - side / 2)), float(round(cy - side / 2)), float(side))
    return fit_square_to_image(snapped, width, height)


def cut_square(image: np.ndarray, square: AxisAlignedSquare, padding) -> np.ndarray:
    """Clip ``square`` to the image and edge-replicate the padding back in."""
    h, w = image.shape[:2]
    x0, y0 = max(int(square.min_x), 0), max(int(square.min_y), 0)
    x1, y1 = min(int(square.max_x), w), min(int(square.max_y), h)
    region = image[y0:y1, x0:x1]
    if not padding.empty:
        region = np.pad(region, ((int(padding.top), int(padding.bottom)),
                                 (int(padding.left), int(padding.right)), (0, 0)), mode="edge")
    side = int(square.side)
    assert region.shape[:2] == (side, side), (region.shape, side)
    return region


def resize_square(region: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    if region.shape[:2] == (size, size):
        return np.ascontiguousarray(region)
    return np.asarray(Image.fromarray(region).resize((size, size), Image.BILINEAR))


def _record_crops(record: AnnotatedImageRecord, loader: ImageLoader) -> list[ComponentCrop]:
    image = loader(record.image_path)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"{record.image_path}: expected an RGB image, got shape {image.shape}")
    if image.shape[:2] != (record.height, record.width):
        raise DataError(f"{record.image_id}: image is {image.shape[1]}x{image.shape[0]} "
                        f"but the annotation declares {record.width}x{record.height}")
    out = []
    for ann in sorted(record.annotations, key=lambda a: a.annotation_index):
        try:
            square, padding = pixel_window(ann, record.width, record.height)
        except GeometryError as exc:
            raise DataError(f"image {record.image_id!r} annotation {ann.annotation_index}: {exc}") from None
        pixels = resize_square(cut_square(image, square, padding))
        out.append(ComponentCrop(crop_id_for(record.image_id, ann.annotation_index), pixels,
                                 ann.class_label, (record.image_id, ann.annotation_index, record.face)))
    return out


def iter_crops(records: Sequence[AnnotatedImageRecord], image_loader: ImageLoader = load_rgb,
               workers: int = 1) -> Iterator[ComponentCrop]:
    """Yield crops record by record in (image_id, annotation_index) order."""
    ordered = sorted(records, key=lambda r: r.image_id)
    if workers <= 1:
        for rec in ordered:
            yield from _record_crops(rec, image_loader)
        return
    with ThreadPoolExecutor(workers) as pool:
        # map() preserves input order regardless of completion order
        for crops in pool.map(lambda r: _record_crops(r, image_loader), ordered):
            yield from crops


def extract_crops(records: Sequence[AnnotatedImageRecord], image_loader: ImageLoader = load_rgb,
                  workers: int = 1) -> list[ComponentCrop]:
    return list(iter_crops(records, image_loader, workers))


def save_crop(crop: ComponentCrop, out_dir) -> Path:
    path = Path(out_dir) / crop_filename(crop.crop_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    # lossless and without timestamps, so identical pixels give identical bytes
    Image.fromarray(crop.pixels).save(path, format="PNG", optimize=False)
    return path


# -- manifest ------------------------------------------------------------------

@dataclass(frozen=True)
class CropEntry:
    crop_id: str
    class_label: str
    image_id: str
    annotation_index: int
    face: str
    split: str
    path: str

    def to_dict(self) -> dict:
        return {"crop_id": self.crop_id, "class": self.class_label, "image_id": self.image_id,
                "annotation_index": self.annotation_index, "face": self.face,
                "split": self.split, "path": self.path}


@dataclass
class DatasetManifest:
    classes: list[str]
    crops: list[CropEntry]
    split_seed: int
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        paths = [c.path for c in self.crops]
        if len(set(paths)) != len(paths):
            raise DataError("manifest crop paths are not unique")
        for c in self.crops:
            if c.split not in SPLITS:
                raise DataError(f"{c.crop_id}: invalid split {c.split!r}")
            if c.class_label not in self.classes:
                raise DataError(f"{c.crop_id}: class {c.class_label!r} not in {self.classes}")

    @property
    def counts(self) -> dict[str, dict[str, int]]:
        table = {c: {s: 0 for s in SPLITS} for c in self.classes}
        for e in self.crops:
            table[e.class_label][e.split] += 1
        return table

    def split(self, name: str) -> list[CropEntry]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [c for c in self.crops if c.split == name]

    def resolve(self, entry: CropEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def relabel(self, mapping: Mapping[str, str], classes: Sequence[str]) -> "DatasetManifest":
        """Collapse classes (e.g. pcb/glass/metal_piece -> other); splits are kept."""
        crops = [replace(c, class_label=mapping.get(c.class_label, c.class_label)) for c in self.crops]
        return DatasetManifest(list(classes), crops, self.split_seed, self.root)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "classes": list(self.classes),
            "split_seed": self.split_seed,
            "crops": [c.to_dict() for c in self.crops],
            "counts": self.counts,
        }


def split_sizes(n: int, ratios: Sequence[float] = (70, 20, 10)) -> tuple[int, int, int]:
    """(train, val, test) sizes for one class.

    test = floor(n * test_share) and val is that count scaled by the
    val:test ratio (twice test for 70:20:10); train takes the rest. This
    reproduces every cell of the 1,127-crop distribution exactly.
    """
    r_train, r_val, r_test = ratios
    if min(ratios) <= 0:
        raise ValueError(f"split ratios must be positive, got {ratios}")
    total = r_train + r_val + r_test
    # the small epsilon keeps exact multiples (n*10/100) from flooring down
    test = math.floor(n * r_test / total + 1e-9)
    val = min(n - test, math.floor(test * r_val / r_test + 0.5))
    return n - test - val, val, test


def stratified_split(crops: Iterable, ratios: Sequence[float] = (70, 20, 10), seed: int = 0,
                     classes: Sequence[str] | None = None) -> DatasetManifest:
    """Assign each crop to train/val/test, independently per class.

    ``crops`` may be :class:`ComponentCrop` objects or :class:`CropEntry`
    rows; membership within a class is a seeded shuffle of the crops
    sorted by id, so the result depends only on (crops, ratios, seed).
    """
    rows = []
    for c in crops:
        if isinstance(c, ComponentCrop):
            image_id, idx, face = c.source
            rows.append(CropEntry(c.crop_id, c.class_label, image_id, idx, face, "train",
                                  crop_filename(c.crop_id)))
        else:
            rows.append(c)
    if not rows:
        raise DataError("cannot split an empty crop list")
    if classes is None:
        present = {r.class_label for r in rows}
        classes = [c for c in CLASSES if c in present] + sorted(present - set(CLASSES))
    rng = np.random.default_rng(seed)
    assigned = {}
    for cls in classes:
        members = sorted((r for r in rows if r.class_label == cls), key=lambda r: r.crop_id)
        n = len(members)
        if n < 10:
            logger.warning("class %s has only %d crops; val/test may be empty", cls, n)
        _, n_val, n_test = split_sizes(n, ratios)
        order = rng.permutation(n)
        for rank, i in enumerate(order):
            split = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
            assigned[members[i].crop_id] = split
    missing = [r.crop_id for r in rows if r.crop_id not in assigned]
    if missing:
        raise DataError(f"crops with classes outside {list(classes)}: {missing[:5]}")
    out = sorted((replace(r, split=assigned[r.crop_id]) for r in rows),
                 key=lambda r: (r.image_id, r.annotation_index))
    return DatasetManifest(list(classes), out, seed)


@dataclass(frozen=True)
class ClassDistribution:
    fractions: dict[str, float]

    def __post_init__(self):
        if abs(sum(self.fractions.values()) - 1.0) > 1e-9:
            raise ValueError("class fractions must sum to 1")


def class_distribution(manifest: DatasetManifest) -> ClassDistribution:
    total = len(manifest.crops)
    if total == 0:
        raise DataError("class distribution of an empty manifest")
    counts = manifest.counts
    return ClassDistribution({c: sum(counts[c].values()) / total for c in manifest.classes})


def format_split_table(manifest: DatasetManifest) -> str:
    """Per-class split counts laid out as Set x Class with totals."""
    counts = manifest.counts
    cols = list(manifest.classes)
    w = max(8, *(len(c) + 2 for c in cols))
    lines = [f"{'Set':<12}" + "".join(f"{c:>{w}}" for c in cols) + f"{'Total':>{w}}"]
    for split, name in zip(SPLITS, ("Training", "Validation", "Test")):
        row = [counts[c][split] for c in cols]
        lines.append(f"{name:<12}" + "".join(f"{n:>{w}}" for n in row) + f"{sum(row):>{w}}")
    tot = [sum(counts[c].values()) for c in cols]
    lines.append(f"{'Total':<12}" + "".join(f"{n:>{w}}" for n in tot) + f"{sum(tot):>{w}}")
    return "\n".join(lines)


def write_manifest(manifest: DatasetManifest, path) -> None:
    atomic_write_text(path, json.dumps(manifest.to_dict(), indent=1) + "\n")


_CROP_FIELDS = ("crop_id", "class", "image_id", "annotation_index", "face", "split", "path")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    version = data.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(
            f"{path}: manifest version {version!r} is not supported (expected {MANIFEST_VERSION})")
    for key in ("classes", "split_seed", "crops"):
        if key not in data:
            raise DataError(f"{path}: missing field {key!r}")
    crops = []
    for i, c in enumerate(data["crops"]):
        missing = [f for f in _CROP_FIELDS if f not in c]
        if missing:
            raise DataError(f"{path}: crops[{i}] missing {missing}")
        crops.append(CropEntry(c["crop_id"], c["class"], c["image_id"], int(c["annotation_index"]),
                               c["face"], c["split"], c["path"]))
    manifest = DatasetManifest(list(data["classes"]), crops, int(data["split_seed"]), path.parent)
    if "counts" in data and data["counts"] != manifest.counts:
        raise DataError(f"{path}: counts table does not match the crop list")
    return manifest
