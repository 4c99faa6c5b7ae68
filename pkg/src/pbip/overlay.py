"""Class-colored mask overlays for qualitative inspection."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .data import load_image, load_mask, save_image

logger = logging.getLogger(__name__)

# Fixed class palette (RGB in [0,1]); entries cycle past index 7.
PALETTE = np.array(
    [
        (0.90, 0.10, 0.10),
        (0.10, 0.75, 0.10),
        (0.15, 0.35, 0.95),
        (0.95, 0.85, 0.10),
        (0.80, 0.15, 0.80),
        (0.10, 0.80, 0.80),
        (0.95, 0.55, 0.10),
        (0.55, 0.30, 0.80),
    ],
    dtype=np.float64,
)


def overlay_mask(
    image: np.ndarray,
    mask: np.ndarray,
    alpha: float = 0.45,
    ignore_value: int | None = None,
) -> np.ndarray:
    """Blend class colors over an image; ignore-valued pixels stay untinted."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} vs mask {mask.shape} size mismatch")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    colors = PALETTE[np.asarray(mask, dtype=np.int64) % len(PALETTE)]
    out = (1.0 - alpha) * image + alpha * colors
    if ignore_value is not None:
        keep = mask == ignore_value
        out[keep] = image[keep]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_overlays(
    mask_dir: Path | str,
    image_dir: Path | str,
    out_dir: Path | str,
    alpha: float = 0.45,
    ignore_value: int | None = None,
) -> list[Path]:
    """Write one overlay per mask file with a same-named image.

    Masks without a matching image are skipped with a warning.
    """
    mask_dir = Path(mask_dir)
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for mask_path in sorted(mask_dir.glob("*.png")):
        image_path = image_dir / mask_path.name
        if not image_path.exists():
            candidates = list(image_dir.glob(f"{mask_path.stem}-*.png"))
            if len(candidates) == 1:
                image_path = candidates[0]
            else:
                logger.warning("no image for mask %s; skipped", mask_path.name)
                continue
        image = load_image(image_path)
        mask = load_mask(mask_path)
        if image.shape[:2] != mask.shape:
            logger.warning("size mismatch for %s; skipped", mask_path.name)
            continue
        out_path = out_dir / mask_path.name
        save_image(out_path, overlay_mask(image, mask, alpha, ignore_value))
        written.append(out_path)
    return written
