"""Image matching path: mask aggregation, adaptive thresholding, region
separation, region encoding, and the contrastive similarity losses.

Per-level pseudo-masks are bilinearly upsampled to image resolution and
summed into an aggregate map. A per-class threshold (a fixed fraction of the
map's maximum) binarizes the map; the binary mask and the soft map weight the
input image into per-class foreground and background views, which the frozen
encoder turns into features for the contrastive losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .config import ConfigError
from .simnet import stable_softplus


@dataclass
class SeparationResult:
    """Per-class threshold split of one image batch.

    fg_mask is binary: 1 where the aggregate map meets its class threshold.
    fg_images / bg_images hold the weighted color views, zero outside
    (respectively inside) the thresholded support. present marks which
    classes have image-level labels.
    """

    thresholds: torch.Tensor     # (B, N)
    fg_mask: torch.Tensor        # (B, N, H, W), values in {0, 1}
    fg_images: torch.Tensor      # (B, N, 3, H, W)
    bg_images: torch.Tensor      # (B, N, 3, H, W)
    present: torch.Tensor        # (B, N) bool


@dataclass
class MatchFeatures:
    """Encoded and per-level projected region features for one batch."""

    fg_levels: list[torch.Tensor]   # each (B, N, C_i)
    bg_levels: list[torch.Tensor]   # each (B, N, C_i)
    present: torch.Tensor           # (B, N) bool


def aggregate_masks(levels: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
    """Sum of per-level masks bilinearly upsampled to ``size``.

    levels: list of (B, N, H_i, W_i); returns (B, N, H, W). With three
    levels in [-1, 1] the sum lies in [-3, 3].
    """
    if not levels:
        raise ValueError("need at least one mask level")
    total = None
    for m in levels:
        up = m if m.shape[-2:] == tuple(size) else F.interpolate(
            m, size=size, mode="bilinear", align_corners=False
        )
        total = up if total is None else total + up
    return total


def adaptive_threshold(
    aggregate: torch.Tensor,
    scale: float,
    scope: str = "per_class",
) -> torch.Tensor:
    """Threshold = ``scale`` times the aggregate map's maximum.

    ``per_class`` takes the spatial max separately per class; ``global``
    shares one max across classes per image. Returns (B, N).
    """
    if not 0.0 <= scale <= 1.0:
        raise ConfigError(f"threshold scale must lie in [0, 1], got {scale}")
    if scope not in ("per_class", "global"):
        raise ConfigError(f"unknown threshold scope {scope!r}")
    per_class_max = aggregate.detach().amax(dim=(2, 3))   # (B, N), a decision constant
    if scope == "global":
        per_class_max = per_class_max.amax(dim=1, keepdim=True).expand_as(per_class_max)
    return scale * per_class_max


def separate(
    aggregate: torch.Tensor,
    thresholds: torch.Tensor,
    images: torch.Tensor,
    labels: torch.Tensor,
    weight_norm: str = "clamp",
) -> SeparationResult:
    """Split each image into per-class foreground and background views.

    fg_mask(p, n) = 1 iff aggregate(p, n) >= thresholds[n]. The soft weight
    is the aggregate map squeezed into [0, 1] ("clamp" truncates, "minmax"
    rescales per class); foreground = mask * weight * image, background =
    (1 - mask) * (1 - weight) * image. Thresholding contributes no gradient;
    the soft weight keeps the path to the backbone differentiable.
    """
    if weight_norm not in ("clamp", "minmax"):
        raise ConfigError(f"unknown weight_norm {weight_norm!r}")
    fg_mask = (aggregate >= thresholds[:, :, None, None]).to(aggregate.dtype).detach()
    if weight_norm == "clamp":
        weight = aggregate.clamp(0.0, 1.0)
    else:
        lo = aggregate.amin(dim=(2, 3), keepdim=True)
        hi = aggregate.amax(dim=(2, 3), keepdim=True)
        weight = ((aggregate - lo) / (hi - lo).clamp_min(1e-8)).clamp(0.0, 1.0)
    fg_w = (fg_mask * weight)[:, :, None, :, :]              # (B, N, 1, H, W)
    bg_w = ((1.0 - fg_mask) * (1.0 - weight))[:, :, None, :, :]
    imgs = images[:, None, :, :, :]                          # (B, 1, 3, H, W)
    return SeparationResult(
        thresholds=thresholds.detach(),
        fg_mask=fg_mask,
        fg_images=fg_w * imgs,
        bg_images=bg_w * imgs,
        present=labels.bool(),
    )


def encode_regions(sep: SeparationResult, encoder: nn.Module, projector: nn.Module) -> MatchFeatures:
    """Encode per-class region views and project them per pyramid level.

    The frozen encoder maps each (3, H, W) view to a d-vector (resizing to
    its native resolution internally); the projector, shared with the
    prototypes, lifts d to each level's channel width.
    """
    b, n = sep.fg_images.shape[:2]
    flat_fg = sep.fg_images.reshape(b * n, *sep.fg_images.shape[2:])
    flat_bg = sep.bg_images.reshape(b * n, *sep.bg_images.shape[2:])
    emb_fg = encoder(flat_fg)
    emb_bg = encoder(flat_bg)
    fg_levels = [lvl.reshape(b, n, -1) for lvl in projector(emb_fg)]
    bg_levels = [lvl.reshape(b, n, -1) for lvl in projector(emb_bg)]
    return MatchFeatures(fg_levels=fg_levels, bg_levels=bg_levels, present=sep.present)


def _pair_scores(
    region: torch.Tensor,
    prototypes: torch.Tensor,
    reduce: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Own-class and other-class score per class from dot products.

    region: (N, C), prototypes: (N, K, C). ``reduce="sum"`` totals the dot
    products over its group; ``"mean"`` averages them.
    """
    n, k, _ = prototypes.shape
    scores = torch.einsum("nc,mkc->nmk", region, prototypes)   # (N, N, K)
    own = scores[torch.arange(n), torch.arange(n)]             # (N, K)
    own_score = own.sum(dim=1) if reduce == "sum" else own.mean(dim=1)
    total = scores.sum(dim=(1, 2))
    other_sum = total - own.sum(dim=1)
    if reduce == "sum":
        other_score = other_sum
    else:
        other_score = other_sum / max((n - 1) * k, 1)
    return own_score, other_score


def fg_similarity_loss(
    fg_feats: torch.Tensor,
    prototypes: torch.Tensor,
    present: torch.Tensor,
    temperature: float = 1.0,
    score_mode: str = "as_written",
) -> torch.Tensor:
    """Contrast each present class's foreground feature with its prototypes.

    Per class j: own score totals the dot products against class-j
    prototypes; other score totals them against all other classes'
    prototypes ("mean" mode averages instead). The term is
    softplus((other - own) / temperature), averaged over present classes.
    """
    if not bool(present.any()):
        raise ValueError("empty label: no present classes")
    reduce = "sum" if score_mode == "as_written" else "mean"
    own, other = _pair_scores(fg_feats, prototypes, reduce)
    terms = stable_softplus((other - own) / temperature)
    return terms[present].mean()


def bg_similarity_loss(
    bg_feats: torch.Tensor,
    prototypes: torch.Tensor,
    present: torch.Tensor,
    temperature: float = 1.0,
    score_mode: str = "as_written",
) -> torch.Tensor:
    """Background counterpart; scores average over their groups."""
    if not bool(present.any()):
        raise ValueError("empty label: no present classes")
    del score_mode  # background scores are means in both modes
    own, other = _pair_scores(bg_feats, prototypes, "mean")
    terms = stable_softplus((other - own) / temperature)
    return terms[present].mean()


def similarity_loss(
    fgs: torch.Tensor,
    bgs: torch.Tensor,
    fg_weight: float = 1.0,
    bg_weight: float = 0.5,
) -> torch.Tensor:
    """Weighted combination of the foreground and background terms."""
    if fg_weight < 0 or bg_weight < 0:
        raise ConfigError("similarity loss weights must be >= 0")
    return fg_weight * fgs + bg_weight * bgs


def batch_similarity_terms(
    feats: MatchFeatures,
    projected_prototypes: list[torch.Tensor],
    temperature: float = 1.0,
    score_mode: str = "as_written",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Foreground and background loss terms for a batch.

    Each image contributes its mean over present classes; levels weigh
    equally; the batch aggregates by mean. Images with empty labels raise.
    """
    b = feats.present.shape[0]
    fg_total = feats.fg_levels[0].new_zeros(())
    bg_total = fg_total.clone()
    n_levels = len(feats.fg_levels)
    for i in range(b):
        present = feats.present[i]
        fg_i = fg_total.new_zeros(())
        bg_i = fg_total.new_zeros(())
        for lvl in range(n_levels):
            fg_i = fg_i + fg_similarity_loss(
                feats.fg_levels[lvl][i], projected_prototypes[lvl], present,
                temperature, score_mode,
            )
            bg_i = bg_i + bg_similarity_loss(
                feats.bg_levels[lvl][i], projected_prototypes[lvl], present,
                temperature, score_mode,
            )
        fg_total = fg_total + fg_i / n_levels
        bg_total = bg_total + bg_i / n_levels
    return fg_total / b, bg_total / b


class MatchNet(nn.Module):
    """Bundles the frozen region encoder with the shared projector."""

    def __init__(self, encoder: nn.Module, projector: nn.Module) -> None:
        super().__init__()
        self.encoder = encoder
        self.projector = projector

    def forward(
        self,
        mask_levels: list[torch.Tensor],
        images: torch.Tensor,
        labels: torch.Tensor,
        threshold_scale: float = 0.15,
        threshold_scope: str = "per_class",
        weight_norm: str = "clamp",
        use_adaptive_threshold: bool = True,
    ) -> tuple[SeparationResult, MatchFeatures]:
        aggregate = aggregate_masks(mask_levels, images.shape[-2:])
        if use_adaptive_threshold:
            thresholds = adaptive_threshold(aggregate, threshold_scale, threshold_scope)
        else:
            thresholds = aggregate.new_zeros(aggregate.shape[:2])
        sep = separate(aggregate, thresholds, images, labels, weight_norm)
        feats = encode_regions(sep, self.encoder, self.projector)
        return sep, feats
