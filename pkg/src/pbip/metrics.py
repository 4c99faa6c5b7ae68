"""Segmentation evaluation: IoU family, boundary IoU, Dice, significance.

All metrics run off an N x N confusion matrix of (gt, pred) pixel counts.
Ground-truth pixels equal to the ignore value are skipped. Boundary IoU
restricts scoring to a band around class boundaries before intersecting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats


class MetricError(ValueError):
    """Raised for empty accumulators or malformed mask pairs."""


class ConfusionAccumulator:
    """Pixel-count confusion matrix over (gt class, pred class)."""

    def __init__(self, num_classes: int, ignore_value: int | None = None) -> None:
        if num_classes < 1:
            raise MetricError("need at least one class")
        self.num_classes = num_classes
        self.ignore_value = num_classes if ignore_value is None else ignore_value
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionAccumulator":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        keep = gt != self.ignore_value
        self.ignored += int((~keep).sum())
        gt_kept = gt[keep].astype(np.int64)
        pred_kept = pred[keep].astype(np.int64)
        if gt_kept.size and (gt_kept.min() < 0 or gt_kept.max() >= self.num_classes):
            raise MetricError("gt mask contains out-of-range class values")
        if pred_kept.size and (
            pred_kept.min() < 0
            or ((pred_kept >= self.num_classes) & (pred_kept != self.ignore_value)).any()
        ):
            raise MetricError("pred mask contains out-of-range class values")
        if (pred_kept == self.ignore_value).any() and self.ignore_value >= self.num_classes:
            raise MetricError("pred mask uses the ignore value at a scored pixel")
        np.add.at(self.matrix, (gt_kept, pred_kept), 1)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise MetricError("class count mismatch in merge")
        self.matrix += other.matrix
        self.ignored += other.ignored
        return self

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def compute_iou_family(acc: ConfusionAccumulator) -> dict:
    """Per-class IoU/Dice plus mean IoU, frequency-weighted IoU, mean Dice.

    Classes with zero ground-truth and zero predicted support are excluded
    from the means and reported as None.
    """
    m = acc.matrix
    if m.sum() == 0:
        raise MetricError("empty accumulator: no scored pixels")
    tp = np.diag(m).astype(np.float64)
    gt_count = m.sum(axis=1).astype(np.float64)
    pred_count = m.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    supported = union > 0
    iou = np.full(acc.num_classes, np.nan)
    dice = np.full(acc.num_classes, np.nan)
    iou[supported] = tp[supported] / union[supported]
    dice[supported] = 2 * tp[supported] / (gt_count + pred_count)[supported]
    total = m.sum()
    fwiou = float(np.sum((gt_count[supported] / total) * iou[supported]))
    return {
        "per_class_iou": [None if not s else float(v) for s, v in zip(supported, iou)],
        "per_class_dice": [None if not s else float(v) for s, v in zip(supported, dice)],
        "miou": float(iou[supported].mean()),
        "fwiou": fwiou,
        "mean_dice": float(dice[supported].mean()),
    }


_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """4-connected erosion difference; image border counts as inside."""
    eroded = ndimage.binary_erosion(mask, structure=_STRUCTURE_4, border_value=1)
    return mask & ~eroded


class BoundaryAccumulator:
    """Per-class intersection/union counts restricted to boundary bands."""

    def __init__(self, num_classes: int, radius: int = 2, ignore_value: int | None = None) -> None:
        if radius < 1:
            raise MetricError("boundary radius must be >= 1")
        self.num_classes = num_classes
        self.radius = radius
        self.ignore_value = num_classes if ignore_value is None else ignore_value
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "BoundaryAccumulator":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != self.ignore_value
        for c in range(self.num_classes):
            pred_c = (pred == c) & valid
            gt_c = (gt == c) & valid
            boundary = _boundary(pred_c) | _boundary(gt_c)
            if not boundary.any():
                continue
            region = ndimage.distance_transform_edt(~boundary) <= self.radius
            p = pred_c & region
            g = gt_c & region
            self.intersection[c] += int((p & g).sum())
            self.union[c] += int((p | g).sum())
        return self

    def per_class(self) -> list[float | None]:
        out: list[float | None] = []
        for c in range(self.num_classes):
            if self.union[c] == 0:
                out.append(None)
            else:
                out.append(float(self.intersection[c] / self.union[c]))
        return out

    def mean(self) -> float:
        values = [v for v in self.per_class() if v is not None]
        if not values:
            raise MetricError("no class produced a boundary; boundary IoU undefined")
        return float(np.mean(values))


def boundary_iou(
    pred: np.ndarray,
    gt: np.ndarray,
    radius: int = 2,
    num_classes: int | None = None,
    ignore_value: int | None = None,
) -> tuple[list[float | None], float]:
    """Single-pair convenience wrapper returning (per-class, mean)."""
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
        if ignore_value is not None and ignore_value < num_classes:
            num_classes = ignore_value
    acc = BoundaryAccumulator(num_classes, radius, ignore_value)
    acc.accumulate(pred, gt)
    return acc.per_class(), acc.mean()


def welch_t_test(samples_a, samples_b) -> float:
    """Two-sided unequal-variance t-test p-value."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise MetricError("each sample list needs at least two values")
    if np.var(a) == 0 and np.var(b) == 0:
        if np.allclose(a.mean(), b.mean()):
            return 1.0
        raise MetricError("both samples degenerate with different means")
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


@dataclass
class EvalReport:
    """Aggregate segmentation scores for one evaluation run."""

    class_names: list[str]
    per_class_iou: list[float | None]
    per_class_dice: list[float | None]
    miou: float
    fwiou: float
    biou: float
    mean_dice: float
    per_class_biou: list[float | None] = field(default_factory=list)
    num_images: int = 0

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "per_class_iou": self.per_class_iou,
            "per_class_dice": self.per_class_dice,
            "per_class_biou": self.per_class_biou,
            "miou": self.miou,
            "fwiou": self.fwiou,
            "biou": self.biou,
            "mean_dice": self.mean_dice,
            "num_images": self.num_images,
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def evaluate_mask_pairs(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    class_names: list[str],
    boundary_radius: int = 2,
    ignore_value: int | None = None,
) -> EvalReport:
    """Score a list of (pred, gt) mask pairs into one report."""
    if not pairs:
        raise MetricError("no mask pairs to evaluate")
    n = len(class_names)
    acc = ConfusionAccumulator(n, ignore_value)
    bacc = BoundaryAccumulator(n, boundary_radius, ignore_value)
    for pred, gt in pairs:
        acc.accumulate(pred, gt)
        bacc.accumulate(pred, gt)
    fam = compute_iou_family(acc)
    return EvalReport(
        class_names=list(class_names),
        per_class_iou=fam["per_class_iou"],
        per_class_dice=fam["per_class_dice"],
        miou=fam["miou"],
        fwiou=fam["fwiou"],
        biou=bacc.mean(),
        mean_dice=fam["mean_dice"],
        per_class_biou=bacc.per_class(),
        num_images=len(pairs),
    )


def summarize_seed_runs(values_by_run: list[float]) -> dict:
    """Mean and std of one metric across seed runs."""
    arr = np.asarray(values_by_run, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("no runs to summarize")
    return {
        "values": [float(v) for v in arr],
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
    }
