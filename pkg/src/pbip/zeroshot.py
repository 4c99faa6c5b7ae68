"""Zero-shot patch classification against class prototypes.

A patch is embedded once by the frozen encoder and scored per class by the
mean cosine similarity to that class's subclass prototypes; the argmax wins,
lowest index first on ties. Evaluation reports one-vs-rest F1 per class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PatchRecord


class ZeroShotError(ValueError):
    """Raised for degenerate embeddings or empty evaluation sets."""


def prototype_scores(embedding: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Mean cosine similarity of one embedding to each class's prototypes.

    embedding: (d,); prototypes: (N, K, d); returns (N,). Zero-norm inputs
    are rejected rather than clamped.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    protos = np.asarray(prototypes, dtype=np.float64)
    emb_norm = np.linalg.norm(emb)
    if emb_norm <= 1e-12:
        raise ZeroShotError("zero-norm embedding; cosine scores undefined")
    proto_norms = np.linalg.norm(protos, axis=2)
    if (proto_norms <= 1e-12).any():
        raise ZeroShotError("zero-norm prototype; rebuild the bank")
    cos = (protos @ emb) / (proto_norms * emb_norm)
    return cos.mean(axis=1)


@dataclass
class ZeroShotResult:
    scores: np.ndarray
    predicted: int


def zeroshot_classify(image: np.ndarray, encoder, prototypes: np.ndarray) -> ZeroShotResult:
    """Score one image against all class prototypes and take the argmax."""
    embedding = encoder.embed_images([image])[0]
    scores = prototype_scores(embedding, prototypes)
    return ZeroShotResult(scores=scores, predicted=int(scores.argmax()))


def one_vs_rest_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> list[float | None]:
    """Per-class F1; classes with zero ground-truth support report None."""
    out: list[float | None] = []
    for c in range(num_classes):
        tp = int(((y_true == c) & (y_pred == c)).sum())
        fp = int(((y_true != c) & (y_pred == c)).sum())
        fn = int(((y_true == c) & (y_pred != c)).sum())
        if tp + fn == 0:
            out.append(None)
            continue
        denom = 2 * tp + fp + fn
        out.append(0.0 if denom == 0 else 2 * tp / denom)
    return out


def zeroshot_eval(
    records: list[PatchRecord],
    encoder,
    prototypes: np.ndarray,
    class_names: list[str] | None = None,
) -> dict:
    """Classify every single-class record and tabulate per-class F1.

    Multi-class records are skipped (classification here is single-label).
    """
    num_classes = prototypes.shape[0]
    singles = [r for r in records if r.is_single_class()]
    if not singles:
        raise ZeroShotError("no single-class records to evaluate")
    embeddings = encoder.embed_images([r.image() for r in singles])
    y_true = np.array([int(r.present_classes()[0]) for r in singles])
    y_pred = np.array(
        [int(prototype_scores(e, prototypes).argmax()) for e in embeddings]
    )
    per_class = one_vs_rest_f1(y_true, y_pred, num_classes)
    reported = [v for v in per_class if v is not None]
    names = class_names if class_names else [f"class_{i}" for i in range(num_classes)]
    return {
        "per_class_f1": {n: v for n, v in zip(names, per_class)},
        "macro_f1": float(np.mean(reported)),
        "accuracy": float((y_true == y_pred).mean()),
        "num_evaluated": len(singles),
    }


def save_report(report: dict, path: Path | str) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
