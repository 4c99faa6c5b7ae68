"""Synthetic textured dataset for desk-scale validation.

Each class is a distinct base hue carrying a few low-frequency sinusoidal
texture variants, built so classes separate linearly under the toy encoder
while variants give each class visible subclass structure for clustering.
Train patches are single-class; val/test patches are rectangular mosaics of
several classes with exact ground-truth masks.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import encode_label_name, save_image, save_mask

_TISSUE_NAMES = ["tumor", "stroma", "lymphocyte", "necrosis", "mucosa", "debris"]


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    patch_size: int = 64
    train_per_class: int = 50
    val_patches: int = 100
    test_patches: int = 0
    variants_per_class: int = 3
    white_patches: int = 0      # near-white distractors, excluded by the bank filter
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size % 16:
            raise ValueError("patch_size must be divisible by 16")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.train_per_class < 1 or self.variants_per_class < 1:
            raise ValueError("counts must be positive")

    def class_names(self) -> list[str]:
        if self.num_classes <= len(_TISSUE_NAMES):
            return _TISSUE_NAMES[: self.num_classes]
        return [f"class_{i}" for i in range(self.num_classes)]


def _base_color(class_id: int, variant: int, num_classes: int) -> np.ndarray:
    """Variant-dependent base color.

    Class hues sit close together (inter-class homogeneity) while variants of
    one class swing brightness and saturation widely (intra-class
    heterogeneity), the regime the prototype bank is meant to handle.
    """
    hue = (0.02 + 0.12 * class_id) % 1.0 if num_classes <= 8 else class_id / num_classes
    sat = 0.38 + 0.18 * (variant % 3)
    val = 0.42 + 0.14 * ((variant + class_id) % 3)
    rgb = colorsys.hsv_to_rgb(hue, sat, val)
    return np.array(rgb, dtype=np.float64)


def class_texture(
    class_id: int,
    variant: int,
    size: int,
    num_classes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """One HxWx3 patch of the given class and texture variant."""
    base = _base_color(class_id, variant, num_classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = np.pi * (class_id + num_classes * variant) / 6.0
    freq = 1.0 + variant
    phase = 2.0 * np.pi * (class_id / max(num_classes, 1))
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) / size + phase)
    img = base[None, None, :] + 0.07 * wave[:, :, None]
    img = img + rng.uniform(-0.03, 0.03, size=(size, size, 3))
    return np.clip(img, 0.02, 0.84).astype(np.float32)


def _white_patch(size: int, rng: np.random.Generator) -> np.ndarray:
    img = 0.97 + rng.uniform(-0.02, 0.02, size=(size, size, 3))
    return np.clip(img, 0.90, 1.0).astype(np.float32)


def _mosaic_regions(rng: np.random.Generator, size: int, num_classes: int):
    """Rectangular partition of the patch: list of (slice_y, slice_x, class)."""
    lo, hi = size // 4, 3 * size // 4
    style = rng.random()
    if style < 0.5 or num_classes < 3:
        cut = int(rng.integers(lo, hi + 1))
        classes = rng.choice(num_classes, size=2, replace=False)
        if rng.random() < 0.5:
            return [
                (slice(0, cut), slice(0, size), int(classes[0])),
                (slice(cut, size), slice(0, size), int(classes[1])),
            ]
        return [
            (slice(0, size), slice(0, cut), int(classes[0])),
            (slice(0, size), slice(cut, size), int(classes[1])),
        ]
    if style < 0.8 or num_classes < 4:
        cuts = np.sort(rng.choice(np.arange(lo, hi + 1), size=2, replace=False))
        classes = rng.choice(num_classes, size=3, replace=False)
        horizontal = rng.random() < 0.5
        spans = [(0, int(cuts[0])), (int(cuts[0]), int(cuts[1])), (int(cuts[1]), size)]
        out = []
        for (a, b), c in zip(spans, classes):
            if horizontal:
                out.append((slice(a, b), slice(0, size), int(c)))
            else:
                out.append((slice(0, size), slice(a, b), int(c)))
        return out
    cut_y = int(rng.integers(lo, hi + 1))
    cut_x = int(rng.integers(lo, hi + 1))
    classes = rng.choice(num_classes, size=4, replace=False)
    return [
        (slice(0, cut_y), slice(0, cut_x), int(classes[0])),
        (slice(0, cut_y), slice(cut_x, size), int(classes[1])),
        (slice(cut_y, size), slice(0, cut_x), int(classes[2])),
        (slice(cut_y, size), slice(cut_x, size), int(classes[3])),
    ]


def mosaic_patch(
    rng: np.random.Generator,
    spec: SyntheticSpec,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(image, gt_mask, multi-hot labels) for one mixed-class patch."""
    size = spec.patch_size
    image = np.zeros((size, size, 3), dtype=np.float32)
    gt = np.zeros((size, size), dtype=np.uint8)
    labels = np.zeros(spec.num_classes, dtype=np.int64)
    for sy, sx, cls in _mosaic_regions(rng, size, spec.num_classes):
        variant = int(rng.integers(spec.variants_per_class))
        tile = class_texture(cls, variant, size, spec.num_classes, rng)
        image[sy, sx] = tile[sy, sx]
        gt[sy, sx] = cls
        labels[cls] = 1
    return image, gt, labels


def generate_synthetic(spec: SyntheticSpec, root: Path | str) -> Path:
    """Write the full dataset tree under ``root``; byte-identical per seed."""
    root = Path(root)
    train_dir = root / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    names = spec.class_names()
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in names), encoding="utf-8")

    sidecar_lines: list[str] = []
    for cls in range(spec.num_classes):
        for i in range(spec.train_per_class):
            variant = i % spec.variants_per_class
            image = class_texture(cls, variant, spec.patch_size, spec.num_classes, rng)
            labels = np.zeros(spec.num_classes, dtype=np.int64)
            labels[cls] = 1
            stem = encode_label_name(f"tr_{cls:02d}_{i:03d}", labels)
            save_image(train_dir / f"{stem}.png", image)
        for i in range(spec.white_patches):
            image = _white_patch(spec.patch_size, rng)
            labels = np.zeros(spec.num_classes, dtype=np.int64)
            labels[cls] = 1
            stem = encode_label_name(f"wh_{cls:02d}_{i:03d}", labels)
            save_image(train_dir / f"{stem}.png", image)

    for split, count in (("val", spec.val_patches), ("test", spec.test_patches)):
        if count == 0:
            continue
        img_dir = root / split / "img"
        mask_dir = root / split / "mask"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            image, gt, labels = mosaic_patch(rng, spec)
            patch_id = f"{split[:2]}_{i:03d}"
            save_image(img_dir / f"{patch_id}.png", image)
            save_mask(mask_dir / f"{patch_id}.png", gt)
            bits = ",".join(str(int(v)) for v in labels)
            sidecar_lines.append(f"{patch_id}\t{split}\t{bits}")

    if sidecar_lines:
        (root / "labels.tsv").write_text(
            "".join(f"{line}\n" for line in sidecar_lines), encoding="utf-8"
        )
    return root
