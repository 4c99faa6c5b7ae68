"""Dataset manifest, patch records, and deterministic batch iteration.

On-disk layout under a data root::

    root/
      classes.txt                     optional, one class name per line
      train/<id>-[l1 l2 ... lN].png   image-level multi-hot label in the name
      val/img/<id>.png   val/mask/<id>.png
      test/img/<id>.png  test/mask/<id>.png

Masks are 8-bit single-channel class-index maps; the value N (the class
count) marks ignored pixels. A sidecar ``labels.tsv`` with lines
``id<TAB>split<TAB>l1,l2,...,lN`` supplies labels when the filename does not
carry them, and overrides filename labels when both exist.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

_NAME_RE = re.compile(r"^(?P<id>.+?)-\[(?P<labels>[01](?: [01])*)\]$")


class DataError(ValueError):
    """Raised for malformed layouts, names, or label files."""


def encode_label_name(patch_id: str, labels: np.ndarray | list[int]) -> str:
    """Build the ``<id>-[l1 l2 ... lN]`` stem for a label vector."""
    bits = " ".join(str(int(v)) for v in labels)
    return f"{patch_id}-[{bits}]"


def parse_label_name(stem: str) -> tuple[str, np.ndarray]:
    """Split a filename stem into (patch id, 0/1 label vector)."""
    m = _NAME_RE.match(stem)
    if m is None:
        raise DataError(f"cannot parse labels from filename stem {stem!r}")
    labels = np.array([int(v) for v in m.group("labels").split(" ")], dtype=np.int64)
    return m.group("id"), labels


def load_image(path: Path | str) -> np.ndarray:
    """Read an RGB image as float32 HxWx3 in [0, 1]. Never resizes."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path: Path | str, image: np.ndarray) -> None:
    """Write a float HxWx3 array in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path: Path | str) -> np.ndarray:
    """Read a uint8 class-index mask."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr


def save_mask(path: Path | str, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def white_fraction(image: np.ndarray, white_level: float = 0.86) -> float:
    """Fraction of pixels whose every channel is >= ``white_level``."""
    white = np.all(image >= white_level, axis=-1)
    return float(white.mean())


@dataclass
class PatchRecord:
    """One patch, loaded lazily from disk or carried in memory."""

    patch_id: str
    labels: np.ndarray
    split: str = "train"
    image_path: Path | None = None
    mask_path: Path | None = None
    _image: np.ndarray | None = field(default=None, repr=False)
    _mask: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_arrays(
        cls,
        patch_id: str,
        labels,
        image: np.ndarray,
        mask: np.ndarray | None = None,
        split: str = "train",
    ) -> "PatchRecord":
        rec = cls(patch_id=patch_id, labels=np.asarray(labels, dtype=np.int64), split=split)
        rec._image = np.asarray(image, dtype=np.float32)
        rec._mask = None if mask is None else np.asarray(mask, dtype=np.uint8)
        return rec

    def image(self) -> np.ndarray:
        if self._image is None:
            if self.image_path is None:
                raise DataError(f"record {self.patch_id!r} has no image source")
            self._image = load_image(self.image_path)
        return self._image

    def mask(self) -> np.ndarray:
        if self._mask is None:
            if self.mask_path is None:
                raise DataError(f"record {self.patch_id!r} has no mask source")
            self._mask = load_mask(self.mask_path)
        return self._mask

    def has_mask(self) -> bool:
        return self._mask is not None or self.mask_path is not None

    def is_single_class(self) -> bool:
        return int(self.labels.sum()) == 1

    def present_classes(self) -> np.ndarray:
        return np.flatnonzero(self.labels)


@dataclass
class DatasetManifest:
    """All records for one data root, grouped by split."""

    root: Path
    class_names: list[str]
    train: list[PatchRecord]
    val: list[PatchRecord]
    test: list[PatchRecord]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def ignore_value(self) -> int:
        """Mask value marking unlabeled pixels: the class count itself."""
        return len(self.class_names)

    @property
    def records(self) -> list[PatchRecord]:
        return self.train + self.val + self.test

    def split(self, name: str) -> list[PatchRecord]:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


def _read_sidecar(path: Path) -> dict[tuple[str, str], np.ndarray]:
    table: dict[tuple[str, str], np.ndarray] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected id<TAB>split<TAB>labels")
        patch_id, split, bits = parts
        try:
            labels = np.array([int(v) for v in bits.split(",")], dtype=np.int64)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad label list {bits!r}") from exc
        if not np.isin(labels, (0, 1)).all():
            raise DataError(f"{path}:{lineno}: labels must be 0/1")
        table[(split, patch_id)] = labels
    return table


def _collect_train(
    root: Path,
    sidecar: dict[tuple[str, str], np.ndarray],
    format_hint: str,
) -> list[PatchRecord]:
    train_dir = root / "train"
    if not train_dir.is_dir():
        return []
    records = []
    for path in sorted(train_dir.glob("*.png")):
        stem = path.stem
        if format_hint == "sidecar":
            patch_id, labels = stem, None
        else:
            try:
                patch_id, labels = parse_label_name(stem)
            except DataError:
                if format_hint == "filename":
                    raise DataError(f"{path}: filename does not encode a label vector")
                patch_id, labels = stem, None
        if (("train", patch_id) in sidecar) and format_hint != "filename":
            labels = sidecar[("train", patch_id)]
        if labels is None:
            raise DataError(
                f"{path}: no labels in filename and no sidecar entry for"
                f" ('train', {patch_id!r})"
            )
        if labels.sum() == 0:
            raise DataError(f"{path}: train record has an all-zero label")
        records.append(
            PatchRecord(patch_id=patch_id, labels=labels, split="train", image_path=path)
        )
    records.sort(key=lambda r: r.patch_id)
    return records


def _collect_eval_split(
    root: Path,
    split: str,
    sidecar: dict[tuple[str, str], np.ndarray],
) -> list[PatchRecord]:
    img_dir = root / split / "img"
    mask_dir = root / split / "mask"
    if not img_dir.is_dir():
        return []
    records = []
    for path in sorted(img_dir.glob("*.png")):
        stem = path.stem
        try:
            patch_id, labels = parse_label_name(stem)
        except DataError:
            patch_id, labels = stem, None
        if (split, patch_id) in sidecar:
            labels = sidecar[(split, patch_id)]
        mask_path = mask_dir / f"{patch_id}.png"
        if not mask_path.exists():
            raise DataError(f"{split} image {patch_id!r} has no mask at {mask_path}")
        records.append(
            PatchRecord(
                patch_id=patch_id,
                labels=labels if labels is not None else np.zeros(0, dtype=np.int64),
                split=split,
                image_path=path,
                mask_path=mask_path,
            )
        )
    records.sort(key=lambda r: r.patch_id)
    return records


def load_manifest(root: Path | str, format_hint: str = "auto") -> DatasetManifest:
    """Scan a data root into a manifest. Record order is lexicographic by id.

    ``format_hint``: ``auto`` takes filename labels with sidecar overrides,
    ``filename`` requires filename labels, ``sidecar`` requires sidecar rows.
    """
    if format_hint not in ("auto", "filename", "sidecar"):
        raise DataError(f"unknown format_hint {format_hint!r}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root not found: {root}")
    sidecar_path = root / "labels.tsv"
    sidecar = _read_sidecar(sidecar_path) if sidecar_path.exists() else {}
    train = _collect_train(root, sidecar, format_hint)
    val = _collect_eval_split(root, "val", sidecar)
    test = _collect_eval_split(root, "test", sidecar)
    if not (train or val or test):
        raise DataError(f"no records found under {root}")

    num_classes = 0
    for rec in train + val + test:
        if rec.labels.size:
            num_classes = int(rec.labels.size)
            break
    if num_classes == 0:
        raise DataError(f"no labeled records under {root}; cannot infer class count")
    classes_file = root / "classes.txt"
    if classes_file.exists():
        class_names = [
            line.strip()
            for line in classes_file.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        if len(class_names) != num_classes:
            raise DataError(
                f"{classes_file} lists {len(class_names)} classes but labels have"
                f" {num_classes} entries"
            )
    else:
        class_names = [f"class_{i}" for i in range(num_classes)]

    for rec in train + val + test:
        if rec.labels.size == 0:
            rec.labels = np.zeros(num_classes, dtype=np.int64)
        elif rec.labels.size != num_classes:
            raise DataError(
                f"{rec.image_path}: {rec.labels.size} labels for {num_classes} classes"
            )
    return DatasetManifest(root=root, class_names=class_names, train=train, val=val, test=test)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle of ``range(n)`` for one epoch.

    Derived functionally from (seed, epoch) so resuming at an epoch boundary
    reproduces the exact stream without serializing RNG state.
    """
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n)


def epoch_flips(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-record (horizontal, vertical) flip decisions, same derivation."""
    rng = np.random.default_rng([seed, epoch, 1])
    return rng.random((n, 2)) < 0.5


def apply_flips(image: np.ndarray, flip_h: bool, flip_v: bool) -> np.ndarray:
    if flip_h:
        image = image[:, ::-1, :]
    if flip_v:
        image = image[::-1, :, :]
    return np.ascontiguousarray(image)


def iterate_batches(
    records: list[PatchRecord],
    batch_size: int,
    seed: int,
    epoch: int,
    augment: bool = True,
):
    """Yield (records, images, labels) minibatches for one epoch.

    Images come back as a list (sizes may differ; nothing is resized). Flip
    augmentation is applied to the yielded images when ``augment`` is set.
    """
    order = epoch_order(len(records), seed, epoch)
    flips = (
        epoch_flips(len(records), seed, epoch)
        if augment
        else np.zeros((len(records), 2), dtype=bool)
    )
    for start in range(0, len(records), batch_size):
        idx = order[start : start + batch_size]
        batch = [records[i] for i in idx]
        images = [
            apply_flips(rec.image(), flips[i, 0], flips[i, 1])
            for rec, i in zip(batch, idx)
        ]
        labels = np.stack([rec.labels for rec in batch])
        yield batch, images, labels
