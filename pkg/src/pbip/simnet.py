"""Similarity network: pyramid features scored against class prototypes.

For each pyramid level, every pixel feature is compared to each class's
subclass prototypes by cosine similarity and the subclass scores are
averaged, giving one pseudo-mask per class per level. Global average
pooling over a mask yields that level's image-level class score.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoders import PrototypeProjector, ToyBackbone

COSINE_EPS = 1e-8


def stable_softplus(x: torch.Tensor) -> torch.Tensor:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    return torch.where(
        x > 0,
        x + torch.log1p(torch.exp(-x.abs())),
        torch.log1p(torch.exp(-x.abs())),
    )


def cosine_similarity_masks(
    features: torch.Tensor,
    prototypes: torch.Tensor,
    eps: float = COSINE_EPS,
) -> torch.Tensor:
    """Mean-over-subclass cosine similarity between pixels and prototypes.

    features: (B, C, H, W); prototypes: (N, K, C); returns (B, N, H, W) in
    [-1, 1]. Norms are clamped at ``eps`` so zero vectors score 0 instead of
    dividing by zero.
    """
    if features.shape[1] != prototypes.shape[2]:
        raise ValueError(
            f"channel mismatch: features C={features.shape[1]},"
            f" prototypes C={prototypes.shape[2]}"
        )
    b, c, h, w = features.shape
    n, k, _ = prototypes.shape
    feat = features.permute(0, 2, 3, 1).reshape(b, h * w, c)
    feat = feat / feat.norm(dim=-1, keepdim=True).clamp_min(eps)
    proto = prototypes.reshape(n * k, c)
    proto = proto / proto.norm(dim=-1, keepdim=True).clamp_min(eps)
    sims = feat @ proto.T                      # (B, HW, N*K)
    sims = sims.reshape(b, h * w, n, k).mean(dim=-1)
    return sims.permute(0, 2, 1).reshape(b, n, h, w)


def similarity_masks(
    features: tuple[torch.Tensor, ...],
    projected: list[torch.Tensor],
) -> list[torch.Tensor]:
    """Per-level masks for a feature pyramid and matching projected prototypes."""
    return [cosine_similarity_masks(f, p) for f, p in zip(features, projected)]


def pooled_predictions(levels: list[torch.Tensor]) -> torch.Tensor:
    """Stack spatial means of per-level masks into (B, levels, N) scores."""
    if not levels:
        raise ValueError("need at least one mask level")
    return torch.stack([m.mean(dim=(2, 3)) for m in levels], dim=1)


def classification_loss(
    yhat: torch.Tensor,
    labels: torch.Tensor,
    logit_scale: float = 10.0,
    level_weights: tuple[float, ...] = (1.0, 1.0, 1.0),
    mode: str = "bce",
) -> torch.Tensor:
    """Image-label loss summed over pyramid levels, averaged over classes.

    ``yhat`` is (B, levels, N) or (levels, N) pooled scores; labels are 0/1
    multi-hot. Each level contributes ``level_weights[i]`` times its mean
    per-class loss; with all-zero scores and unit weights the total is
    ``levels * ln 2``. ``bce`` treats each class as an independent sigmoid on
    the scaled score; ``softmax_ce`` normalizes present classes to a uniform
    target distribution.
    """
    if yhat.dim() == 2:
        yhat = yhat.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if yhat.shape[1] != len(level_weights):
        raise ValueError("one level weight per pooled level required")
    labels = labels.to(yhat.dtype)
    if not torch.logical_or(labels == 0, labels == 1).all():
        raise ValueError("labels must be 0/1 multi-hot")
    total = yhat.new_zeros(())
    for i, w in enumerate(level_weights):
        logits = logit_scale * yhat[:, i, :]
        if mode == "bce":
            level = F.binary_cross_entropy_with_logits(logits, labels)
        elif mode == "softmax_ce":
            target = labels / labels.sum(dim=1, keepdim=True).clamp_min(1.0)
            level = -(target * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
        else:
            raise ValueError(f"unknown mode {mode!r}")
        total = total + w * level
    return total


class SimilarityNet(nn.Module):
    """Backbone plus mask heads producing per-level class pseudo-masks.

    ``mask_head="prototype_sim"`` scores pixels against projected prototypes;
    ``"conv1x1"`` swaps in plain per-level 1x1 convolutions (tanh-squashed to
    the same [-1, 1] range) and ignores the prototypes, which is the
    no-prototype ablation head.
    """

    def __init__(
        self,
        num_classes: int,
        prototypes: np.ndarray,
        channel_dims: tuple[int, int, int] = (8, 16, 32),
        mask_head: str = "prototype_sim",
        backbone: nn.Module | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        if mask_head not in ("prototype_sim", "conv1x1"):
            raise ValueError(f"unknown mask_head {mask_head!r}")
        self.num_classes = num_classes
        self.mask_head = mask_head
        self.channel_dims = tuple(channel_dims)
        self.backbone = (
            backbone if backbone is not None else ToyBackbone(self.channel_dims, seed=4321 + seed)
        )
        proto = np.asarray(prototypes, dtype=np.float32)
        if proto.ndim != 3 or proto.shape[0] != num_classes:
            raise ValueError(f"prototypes must be (num_classes, K, d), got {proto.shape}")
        self.register_buffer("prototypes", torch.from_numpy(proto))
        if mask_head == "prototype_sim":
            self.projector = PrototypeProjector(proto.shape[2], self.channel_dims, seed=99 + seed)
            self.conv_heads = None
        else:
            self.projector = None
            rng = np.random.default_rng(55 + seed)
            heads = []
            for c in self.channel_dims:
                conv = nn.Conv2d(c, num_classes, 1)
                scale = 1.0 / np.sqrt(c)
                with torch.no_grad():
                    conv.weight.copy_(
                        torch.from_numpy(
                            rng.uniform(-scale, scale, (num_classes, c, 1, 1))
                        ).float()
                    )
                    conv.bias.zero_()
                heads.append(conv)
            self.conv_heads = nn.ModuleList(heads)

    def projected_prototypes(self) -> list[torch.Tensor] | None:
        if self.projector is None:
            return None
        return self.projector(self.prototypes)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-level class masks, each (B, N, H_i, W_i) in [-1, 1]."""
        feats = self.backbone(x)
        if self.mask_head == "prototype_sim":
            return similarity_masks(feats, self.projected_prototypes())
        return [torch.tanh(head(f)) for f, head in zip(feats, self.conv_heads)]
