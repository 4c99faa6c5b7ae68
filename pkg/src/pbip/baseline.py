"""Fully supervised toy segmenter used as the end-to-end reference point.

Same toy backbone as the main pipeline, but with per-level 1x1 conv heads
trained by per-pixel cross entropy on true masks. Single-class patches
without stored masks use their label as a constant mask, so the model trains
from exactly the same files the weak pipeline sees.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import DatasetManifest, PatchRecord, iterate_batches
from .encoders import ToyBackbone
from .metrics import evaluate_mask_pairs


class SupervisedToySegmenter(nn.Module):
    """Backbone pyramid + per-level 1x1 heads summed at input resolution."""

    def __init__(
        self,
        num_classes: int,
        channel_dims: tuple[int, int, int] = (8, 16, 32),
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.backbone = ToyBackbone(channel_dims, seed=8765 + seed)
        self.heads = nn.ModuleList(
            [nn.Conv2d(c, num_classes, 1) for c in channel_dims]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(x)
        logits = None
        for f, head in zip(feats, self.heads):
            up = F.interpolate(head(f), size=x.shape[-2:], mode="bilinear", align_corners=False)
            logits = up if logits is None else logits + up
        return logits


def _target_mask(record: PatchRecord) -> np.ndarray:
    if record.has_mask():
        return record.mask()
    if not record.is_single_class():
        raise ValueError(
            f"record {record.patch_id!r} has neither a mask nor a single-class label"
        )
    h, w = record.image().shape[:2]
    return np.full((h, w), int(record.present_classes()[0]), dtype=np.uint8)


def train_supervised(
    manifest: DatasetManifest,
    epochs: int = 10,
    batch_size: int = 10,
    lr: float = 3e-3,
    weight_decay: float = 0.003,
    seed: int = 0,
    channel_dims: tuple[int, int, int] = (8, 16, 32),
) -> SupervisedToySegmenter:
    torch.manual_seed(seed)
    model = SupervisedToySegmenter(manifest.num_classes, channel_dims, seed=seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    ignore = manifest.ignore_value
    for epoch in range(epochs):
        # augment=False: flips would desync images from their stored masks
        for batch, images, _ in iterate_batches(
            manifest.train, batch_size, seed, epoch, augment=False
        ):
            x = torch.from_numpy(np.stack(images)).float().permute(0, 3, 1, 2)
            targets = torch.from_numpy(
                np.stack([_target_mask(r) for r in batch])
            ).long()
            logits = model(x)
            loss = F.cross_entropy(logits, targets, ignore_index=ignore)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return model


def predict_mask(model: SupervisedToySegmenter, image: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1)[None]
        logits = model(x)
    return logits.argmax(dim=1).squeeze(0).numpy().astype(np.uint8)


def evaluate_supervised(
    model: SupervisedToySegmenter,
    manifest: DatasetManifest,
    split: str = "val",
) -> float:
    """Mean IoU of the supervised reference on a split with stored masks."""
    pairs = [
        (predict_mask(model, rec.image()), rec.mask())
        for rec in manifest.split(split)
        if rec.has_mask()
    ]
    report = evaluate_mask_pairs(
        pairs, manifest.class_names, ignore_value=manifest.ignore_value
    )
    return report.miou
