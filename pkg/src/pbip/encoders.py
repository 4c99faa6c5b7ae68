"""Image encoders: a frozen embedding encoder and a trainable pyramid backbone.

The frozen encoder maps whole patches (or separated foreground/background
views) to a single d-dimensional embedding; it is used both to cluster the
image bank and to encode regions for the similarity losses. The backbone
produces a three-level feature pyramid at strides 4, 8, and 16 for the
per-pixel similarity masks.

The toy variants are deterministic (weights drawn from a fixed-seed
generator) and small enough for CPU training. Pretrained encoders can be
plugged in through the same interfaces; see :mod:`pbip.pretrained`.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


def _seeded_linear(rng: np.random.Generator, d_in: int, d_out: int) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    scale = 1.0 / np.sqrt(d_in)
    with torch.no_grad():
        lin.weight.copy_(torch.from_numpy(rng.uniform(-scale, scale, (d_out, d_in))).float())
        lin.bias.copy_(torch.from_numpy(rng.uniform(-scale, scale, (d_out,))).float())
    return lin


def _seeded_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2)
    scale = 1.0 / np.sqrt(c_in * k * k)
    with torch.no_grad():
        conv.weight.copy_(
            torch.from_numpy(rng.uniform(-scale, scale, (c_out, c_in, k, k))).float()
        )
        conv.bias.copy_(torch.from_numpy(rng.uniform(-scale, scale, (c_out,))).float())
    return conv


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 float array in [0, 1] to a 1x3xHxW tensor."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected HxWx3, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1).unsqueeze(0)


class ToyEmbedder(nn.Module):
    """Frozen patch embedder: resize to 64, pool to 8x8, linear, tanh.

    Deterministic for a given seed. Parameters never receive gradients, but
    the forward pass stays differentiable with respect to its input so the
    similarity losses can reach the backbone through the separated regions.
    """

    def __init__(self, embed_dim: int = 32, seed: int = 1234) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        self.proj = _seeded_linear(rng, 3 * 8 * 8, embed_dim)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2:] != (64, 64):
            x = F.interpolate(x, size=(64, 64), mode="bilinear", align_corners=False)
        pooled = F.adaptive_avg_pool2d(x, (8, 8))
        flat = pooled.flatten(1)
        return torch.tanh(self.proj(flat))

    @torch.no_grad()
    def embed_images(self, images: list[np.ndarray]) -> np.ndarray:
        """Encode a list of HxWx3 arrays into an (n, d) float32 matrix."""
        out = [self(to_tensor(img)).squeeze(0).numpy() for img in images]
        return np.stack(out).astype(np.float32)


class ToyBackbone(nn.Module):
    """Trainable conv pyramid emitting features at strides 4, 8, and 16.

    Channel dims must be strictly increasing; input height and width must be
    divisible by 16 so the stride contract holds exactly.
    """

    def __init__(self, channel_dims: tuple[int, int, int] = (8, 16, 32), seed: int = 4321) -> None:
        super().__init__()
        self.channel_dims = tuple(channel_dims)
        if list(self.channel_dims) != sorted(set(self.channel_dims)):
            raise ValueError(f"channel_dims must strictly increase, got {channel_dims}")
        c1, c2, c3 = self.channel_dims
        rng = np.random.default_rng(seed)
        self.stem = _seeded_conv(rng, 3, c1, 3, stride=2)
        self.stage1 = _seeded_conv(rng, c1, c1, 3, stride=2)
        self.stage2 = _seeded_conv(rng, c1, c2, 3, stride=2)
        self.stage3 = _seeded_conv(rng, c2, c3, 3, stride=2)
        self.norm1 = nn.GroupNorm(1, c1)
        self.norm2 = nn.GroupNorm(1, c2)
        self.norm3 = nn.GroupNorm(1, c3)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input height and width must be divisible by 16, got {h}x{w}")
        h0 = F.gelu(self.stem(x))
        f1 = self.norm1(F.gelu(self.stage1(h0)))   # stride 4
        f2 = self.norm2(F.gelu(self.stage2(f1)))   # stride 8
        f3 = self.norm3(F.gelu(self.stage3(f2)))   # stride 16
        return f1, f2, f3


class PrototypeProjector(nn.Module):
    """Per-level MLP mapping prototype embeddings (d) into backbone channels."""

    def __init__(
        self,
        embed_dim: int,
        channel_dims: tuple[int, int, int],
        seed: int = 99,
    ) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        self.levels = nn.ModuleList()
        for c in channel_dims:
            self.levels.append(
                nn.Sequential(
                    _seeded_linear(rng, embed_dim, c),
                    nn.ReLU(),
                    _seeded_linear(rng, c, c),
                )
            )

    def forward(self, prototypes: torch.Tensor) -> list[torch.Tensor]:
        """(N, K, d) prototype matrix to one (N, K, C_i) tensor per level."""
        return [level(prototypes) for level in self.levels]


class PretrainedEncoderAdapter:
    """Placeholder hook for a pretrained patch embedder.

    Loading requires the optional ``transformers`` dependency; instantiation
    fails with a clear message when it is missing. Nothing in the test suite
    or pipeline depends on this adapter.
    """

    def __init__(self, model_name: str, embed_dim: int = 512) -> None:
        try:
            import transformers  # noqa: F401
        except ImportError as exc:
            raise ImportError(
                "pretrained encoders need the optional 'transformers' package;"
                " pip install transformers"
            ) from exc
        raise NotImplementedError(
            "wire a pretrained vision encoder here; the toy encoder covers"
            " every contract exercised by the test suite"
        )
