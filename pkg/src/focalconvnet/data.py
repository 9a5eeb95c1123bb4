"""Manifests, image decoding/resizing, augmentation, class weights and a synthetic dataset."""

from __future__ import annotations

import colorsys
import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import fctn
from .errors import ConfigError, DataError, FormatError, LabelError

# Kvasir-Capsule labelled-image counts per class (13 classes).
KVASIR_CAPSULE_COUNTS = {
    "Normal mucosa": 34606,
    "Reduced Mucosal View": 2399,
    "Pylorus": 1520,
    "Polyp": 64,
    "Lymphoid Hyperplasia": 592,
    "Ileo-Cecal valve": 1417,
    "Hematin": 12,
    "Foreign Bodies": 776,
    "Erythematous": 238,
    "Erosion": 438,
    "Blood": 446,
    "Angiectasia": 866,
    "Ulcer": 854,
}
KVASIR_CAPSULE_TOTAL = 44228
REMOVED_CLASSES = ("Polyp", "Hematin")
KVASIR_CAPSULE_11 = {k: v for k, v in KVASIR_CAPSULE_COUNTS.items() if k not in REMOVED_CLASSES}

IMAGE_SIZE = (224, 224)
MAX_ROTATION_DEG = 15.0


@dataclass
class Manifest:
    entries: list[tuple[str, int]]
    class_names: list[str]
    root: Path = field(default_factory=Path)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        k = len(self.class_names)
        for path, idx in self.entries:
            if not 0 <= idx < k:
                raise LabelError(f"entry {path!r} has class index {idx} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for _, idx in self.entries:
            counts[idx] += 1
        return counts

    @property
    def labels(self) -> np.ndarray:
        return np.array([idx for _, idx in self.entries], dtype=np.int64)

    def resolve(self, i: int) -> Path:
        return self.root / self.entries[i][0]


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    label: int


def read_classes(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate class names")
    return names


def load_manifest(csv_path: str | os.PathLike, classes_path: str | os.PathLike | None = None) -> Manifest:
    """Read a ``path,label`` CSV.

    Labels are class names. The class list comes from ``classes_path``, else a
    ``classes.txt`` next to the CSV, else the sorted set of labels seen.
    Relative image paths resolve against the CSV's directory.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DataError(f"manifest not found: {csv_path}")
    if classes_path is None and (csv_path.parent / "classes.txt").is_file():
        classes_path = csv_path.parent / "classes.txt"
    rows: list[tuple[str, str]] = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise DataError(f"{csv_path}:1: expected header 'path,label', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise DataError(f"{csv_path}:{lineno}: malformed row {row!r}")
            rows.append((row[0].strip(), row[1].strip()))
    if classes_path is not None:
        names = read_classes(classes_path)
    else:
        names = sorted({label for _, label in rows})
    index = {n: i for i, n in enumerate(names)}
    entries = []
    for lineno, (path, label) in enumerate(rows, start=2):
        if label not in index:
            raise LabelError(f"{csv_path}:{lineno}: unknown label {label!r}")
        entries.append((path, index[label]))
    return Manifest(entries, names, csv_path.parent)


def write_manifest(manifest: Manifest, csv_path: str | os.PathLike, write_classes: bool = True) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for path, idx in manifest.entries:
            w.writerow([path, manifest.class_names[idx]])
    if write_classes:
        (csv_path.parent / "classes.txt").write_text("".join(n + "\n" for n in manifest.class_names), encoding="utf-8")


# -- image decoding -------------------------------------------------------------
def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array with half-pixel centres and edge clamping."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def decode_image(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """PNG/JPEG (or FCTN) bytes -> float64 (3, H, W) in [0, 1]."""
    if raw[:4] == fctn.MAGIC:
        try:
            arr = fctn.loads(raw)
        except FormatError as e:
            raise DataError(f"{name}: {e}") from None
        return _to_unit_chw(arr, name)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(raw)) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"{name}: cannot decode image ({e})") from None
    return rgb.transpose(2, 0, 1) / 255.0


def _to_unit_chw(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"{name}: expected a (3, H, W) tensor, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    out = arr.astype(np.float64)
    if not np.isfinite(out).all() or out.min() < 0 or out.max() > 1:
        raise DataError(f"{name}: float image values must be finite and within [0, 1]")
    return out


def preprocess(raw: bytes, size: tuple[int, int] = IMAGE_SIZE, name: str = "<bytes>") -> np.ndarray:
    img = decode_image(raw, name)
    return np.clip(resize_bilinear(img, *size), 0.0, 1.0)


def load_sample(manifest: Manifest, i: int, size: tuple[int, int] = IMAGE_SIZE) -> Sample:
    key = (i, tuple(size))
    img = manifest._cache.get(key)
    if img is None:
        path = manifest.resolve(i)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise DataError(f"cannot read image {path}: {e.strerror}") from None
        img = preprocess(raw, size, str(path))
        manifest._cache[key] = img
    return Sample(img, manifest.entries[i][1])


# -- augmentation -----------------------------------------------------------------
def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image centre; bilinear sampling, zeros outside."""
    if degrees == 0:
        return img.copy()
    c, h, w = img.shape
    th = math.radians(degrees)
    cos, sin = math.cos(th), math.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(img)
    for oy, ox, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(ok, wt, 0.0)[None] * vals
    return out


def augment(sample: Sample, rng: np.random.Generator, max_rotation: float = MAX_ROTATION_DEG, p_flip: float = 0.5) -> Sample:
    img = sample.image
    if rng.random() < p_flip:
        img = hflip(img)
    if rng.random() < p_flip:
        img = vflip(img)
    angle = rng.uniform(-max_rotation, max_rotation) if max_rotation > 0 else 0.0
    img = rotate(img, angle)
    return Sample(np.clip(img, 0.0, 1.0), sample.label)


# -- class weights -------------------------------------------------------------------
def class_weights(manifest_or_counts: Manifest | Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``total / (K * count_k)``; mean-1 under uniform counts."""
    counts = manifest_or_counts.class_counts if isinstance(manifest_or_counts, Manifest) else list(manifest_or_counts)
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ConfigError("class_weights needs at least one class")
    if (counts <= 0).any():
        zero = [int(i) for i in np.flatnonzero(counts <= 0)]
        raise ConfigError(f"classes {zero} have no samples; inverse-frequency weight is undefined")
    return counts.sum() / (counts.size * counts)


# -- batching -----------------------------------------------------------------
def epoch_order(n: int, shuffle_seed: int | None, epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def split_iter(
    manifest: Manifest,
    batch_size: int,
    shuffle_seed: int | None = 0,
    epoch: int = 0,
    size: tuple[int, int] = IMAGE_SIZE,
    augment_seed: int | None = None,
) -> Iterator[list[Sample]]:
    """Yield batches of samples; the last partial batch is kept.

    Order depends only on ``(shuffle_seed, epoch)``. With ``augment_seed``
    set, each sample is augmented from a generator seeded by
    ``(augment_seed, epoch)`` consumed in delivery order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(manifest), shuffle_seed, epoch)
    rng = np.random.default_rng([augment_seed, epoch]) if augment_seed is not None else None
    for start in range(0, len(order), batch_size):
        batch = [load_sample(manifest, int(i), size) for i in order[start : start + batch_size]]
        if rng is not None:
            batch = [augment(s, rng) for s in batch]
        yield batch


def stack(batch: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in batch]), np.array([s.label for s in batch], dtype=np.int64)


# -- synthetic data -----------------------------------------------------------------
def synth_image(label: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic (3, size, size) uint8 image: a class-hued shape on a faintly tinted background."""
    hue = label / num_classes
    r, g, b = colorsys.hsv_to_rgb(hue, 0.9, 0.95)
    color = np.array([r, g, b])
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    radius = rng.uniform(0.25, 0.35)
    kind = label % 3
    if kind == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    elif kind == 1:
        mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    else:
        period = rng.uniform(0.18, 0.26)
        mask = ((xx + yy) / period) % 1.0 < 0.5
    background = 0.15 + 0.1 * color
    img = np.where(mask[None], color[:, None, None], background[:, None, None])
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def synth_dataset(
    out_dir: str | os.PathLike, num_classes: int = 4, per_class: int = 16, size: int = 32, seed: int = 0
) -> Manifest:
    """Write a balanced synthetic dataset as FCTN images plus ``manifest.csv`` and ``classes.txt``."""
    if num_classes < 1 or per_class < 1 or size < 2:
        raise ConfigError("synth_dataset needs num_classes >= 1, per_class >= 1, size >= 2")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = [f"class{k}" for k in range(num_classes)]
    entries = []
    for i in range(per_class):
        for k in range(num_classes):
            rel = f"images/{k}_{i:04d}.fctn"
            fctn.save(out / rel, synth_image(k, num_classes, size, rng))
            entries.append((rel, k))
    manifest = Manifest(entries, names, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
