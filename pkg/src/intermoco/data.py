"""Dataset manifests (PNG + CSV), ingestion and synthetic dataset generation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    images: np.ndarray        # N×C×H×W float32 in [0, 1]
    labels: np.ndarray        # N×L int64 in {0, 1}
    splits: np.ndarray        # N strings in SPLITS
    label_names: list[str]
    paths: list[str]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        mask = self.splits == name
        return self.images[mask], self.labels[mask]

    def __len__(self) -> int:
        return len(self.images)


def _decode(path: Path, channels: int | None, size: tuple[int, int] | None) -> np.ndarray:
    with Image.open(path) as im:
        if channels is None:
            channels = 1 if im.mode in ("L", "I;16", "1") else 3
        im = im.convert("L" if channels == 1 else "RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), resample=Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def load_dataset(manifest, root=None, input_size: tuple[int, int] | None = None, channels: int | None = None) -> Dataset:
    """Read a manifest CSV (``path``, ``split``, one 0/1 column per label) and decode its images.

    Images are resized bilinearly to ``input_size`` (H, W) when given. Errors name
    the offending CSV line.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    root = Path(root) if root is not None else manifest.parent
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header or "path" not in header or "split" not in header:
            raise DataError(f"{manifest}: header must contain 'path' and 'split' columns, got {header}")
        label_names = [c for c in header if c not in ("path", "split")]
        if not label_names:
            raise DataError(f"{manifest}: no label columns")
        rows = list(reader)
    if not rows:
        raise DataError(f"{manifest}: manifest has no rows")

    images, labels, splits, paths = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if None in row or any(row.get(c) is None for c in header):
            raise DataError(f"{manifest}:{lineno}: malformed row (wrong number of fields)")
        split = row["split"].strip()
        if split not in SPLITS:
            raise DataError(f"{manifest}:{lineno}: split must be one of {SPLITS}, got {split!r}")
        try:
            lab = [int(row[c]) for c in label_names]
        except ValueError:
            raise DataError(f"{manifest}:{lineno}: labels must be 0 or 1") from None
        if any(v not in (0, 1) for v in lab):
            raise DataError(f"{manifest}:{lineno}: labels must be 0 or 1, got {lab}")
        path = root / row["path"]
        if not path.exists():
            raise DataError(f"{manifest}:{lineno}: image not found: {path}")
        try:
            img = _decode(path, channels, input_size)
        except OSError as exc:
            raise DataError(f"{manifest}:{lineno}: cannot decode {path}: {exc}") from None
        if channels is None:
            channels = img.shape[0]
        if input_size is None:
            input_size = img.shape[1:]
        if images and img.shape != images[0].shape:
            raise DataError(f"{manifest}:{lineno}: image shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(lab)
        splits.append(split)
        paths.append(row["path"])
    if len(set(paths)) != len(paths):
        raise DataError(f"{manifest}: a path appears more than once, splits must be disjoint")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), np.asarray(splits),
                   label_names, paths)


MAX_CLASSES = 7
WATERMARK = 0.1


def _texture(cls: int, num_classes: int, size: int, theta: float, phase: float) -> np.ndarray:
    """Zero-mean class texture: a grating of 2, 4, 6, ... cycles plus a faint fixed watermark.

    The grating frequency encodes the class and survives rotation and color
    changes. The watermark is a fixed diagonal grating whose phase is shifted
    by 2*pi*cls/num_classes, which keeps the classes linearly separable in pixel
    space even when the main grating orientation is random.
    """
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size - 0.5
    freq = 2.0 * (cls + 1)
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    mark = np.sin(2 * np.pi * 6.0 * (xx - yy) / np.sqrt(2) + 2 * np.pi * cls / num_classes)
    return wave + WATERMARK * mark


def generate_synthetic_dataset(
    out_dir,
    num_classes: int = 2,
    samples: int = 500,
    image_size: int = 32,
    noise: float = 1.0,
    seed: int = 0,
    channels: int = 3,
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> Path:
    """Write class-conditional texture images and a manifest CSV; return the manifest path.

    ``noise`` scales every source of within-class variation: grating orientation
    and phase, global brightness, per-channel tint and pixel noise. At
    ``noise=0`` all images of a class are identical. Two classes produce a single
    binary ``label`` column, more classes produce one-hot ``class_<k>`` columns.
    """
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ConfigError(f"num_classes must be in 2..{MAX_CLASSES}, got {num_classes}")
    if samples < 4 * num_classes:
        raise ConfigError(f"need at least 4 samples per class, got {samples} for {num_classes} classes")
    if channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3")
    if noise < 0:
        raise ConfigError("noise must be >= 0")
    if image_size < 8:
        raise ConfigError("image_size must be >= 8")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    classes = np.arange(samples) % num_classes
    classes = classes[rng.permutation(samples)]
    splits = np.empty(samples, dtype=object)
    for c in range(num_classes):
        idx = np.flatnonzero(classes == c)
        n_tr = int(round(split_fractions[0] * len(idx)))
        n_va = int(round(split_fractions[1] * len(idx)))
        splits[idx[:n_tr]] = "train"
        splits[idx[n_tr:n_tr + n_va]] = "val"
        splits[idx[n_tr + n_va:]] = "test"

    label_names = ["label"] if num_classes == 2 else [f"class_{k}" for k in range(num_classes)]
    rows = []
    for i, c in enumerate(classes):
        theta = noise * rng.uniform(0, np.pi)
        phase = noise * rng.uniform(-np.pi, np.pi)
        brightness = np.exp(noise * 0.5 * rng.uniform(-1, 1))
        tint = 1.0 + noise * 0.5 * rng.uniform(-1, 1, size=(channels, 1, 1))
        texture = 0.5 + 0.25 * _texture(int(c), num_classes, image_size, theta, phase)
        img = 0.6 * brightness * tint * texture[None]
        img = img + noise * 0.05 * rng.standard_normal(img.shape)
        pix = np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
        name = f"images/{i:05d}.png"
        Image.fromarray(pix[0] if channels == 1 else pix.transpose(1, 2, 0)).save(out / name)
        labels = [int(c)] if num_classes == 2 else [int(c == k) for k in range(num_classes)]
        rows.append([name, splits[i], *labels])

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "split", *label_names])
        writer.writerows(rows)
    return manifest
