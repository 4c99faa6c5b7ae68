import numpy as np
import pytest
import torch

from pbip.encoders import (
    PretrainedEncoderAdapter,
    PrototypeProjector,
    ToyBackbone,
    ToyEmbedder,
    to_tensor,
)

# Frozen outputs of the seeded toy encoders. These never change unless the
# fixed initialization scheme changes, which would break saved banks and
# checkpoints everywhere.
ZERO_IMAGE_EMBED_HEAD = [0.04411648, -0.06375773, 0.04011836, 0.01177719, -0.04322192, -0.05906676]
ZERO_IMAGE_EMBED_SUM = -0.24530172
BACKBONE_CONST_GOLDENS = [
    # (level, index, value) for a constant 0.5 image of size 64x64
    (0, (0, 0, 0, 0), 0.11562462),
    (0, (0, -1, 2, 3), 2.25260043),
    (1, (0, 0, 0, 0), 0.11950780),
    (1, (0, -1, 2, 3), 0.68230557),
    (2, (0, 0, 0, 0), -0.12739201),
    (2, (0, -1, 2, 3), 0.91579986),
]


def test_to_tensor_shape_and_values():
    img = np.random.default_rng(0).uniform(size=(10, 12, 3)).astype(np.float32)
    t = to_tensor(img)
    assert t.shape == (1, 3, 10, 12)
    assert torch.allclose(t[0].permute(1, 2, 0), torch.from_numpy(img))


def test_to_tensor_rejects_bad_shapes():
    with pytest.raises(ValueError):
        to_tensor(np.zeros((10, 12), dtype=np.float32))
    with pytest.raises(ValueError):
        to_tensor(np.zeros((10, 12, 4), dtype=np.float32))


# -- frozen patch embedder ------------------------------------------------------


def test_embedder_zero_image_golden(embedder):
    v = embedder.embed_images([np.zeros((64, 64, 3), dtype=np.float32)])[0]
    assert v.shape == (32,)
    assert np.allclose(v[:6], ZERO_IMAGE_EMBED_HEAD, atol=1e-6)
    assert v.sum() == pytest.approx(ZERO_IMAGE_EMBED_SUM, abs=1e-5)


def test_embedder_deterministic_across_instances(embedder):
    img = np.random.default_rng(1).uniform(size=(50, 70, 3)).astype(np.float32)
    other = ToyEmbedder(embed_dim=32)
    a = embedder.embed_images([img])
    b = other.embed_images([img])
    assert np.array_equal(a, b)


def test_embedder_output_bounded(embedder):
    img = np.random.default_rng(2).uniform(size=(64, 64, 3)).astype(np.float32)
    v = embedder.embed_images([img])[0]
    assert np.all(np.abs(v) <= 1.0)  # tanh output


def test_embedder_accepts_any_size(embedder):
    out = embedder.embed_images(
        [
            np.zeros((16, 16, 3), dtype=np.float32),
            np.zeros((100, 40, 3), dtype=np.float32),
        ]
    )
    assert out.shape == (2, 32)
    assert out.dtype == np.float32


def test_embedder_is_frozen(embedder):
    assert all(not p.requires_grad for p in embedder.parameters())


def test_embedder_separates_corpus(small_manifest, embedder):
    records = small_manifest.train[:12]
    embs = embedder.embed_images([r.image() for r in records])
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            assert not np.allclose(embs[i], embs[j], atol=1e-6)


# -- toy backbone ---------------------------------------------------------------


def test_backbone_pyramid_shapes():
    bb = ToyBackbone(channel_dims=(8, 16, 32))
    x = torch.zeros(2, 3, 64, 96)
    f1, f2, f3 = bb(x)
    assert f1.shape == (2, 8, 16, 24)
    assert f2.shape == (2, 16, 8, 12)
    assert f3.shape == (2, 32, 4, 6)


def test_backbone_strides_4_8_16():
    bb = ToyBackbone()
    x = torch.zeros(1, 3, 224, 224)
    shapes = [tuple(f.shape[-2:]) for f in bb(x)]
    assert shapes == [(56, 56), (28, 28), (14, 14)]


def test_backbone_rejects_indivisible_input():
    bb = ToyBackbone()
    with pytest.raises(ValueError, match="16"):
        bb(torch.zeros(1, 3, 60, 64))


def test_backbone_rejects_non_increasing_channels():
    with pytest.raises(ValueError):
        ToyBackbone(channel_dims=(16, 8, 32))
    with pytest.raises(ValueError):
        ToyBackbone(channel_dims=(8, 8, 32))


def test_backbone_goldens():
    bb = ToyBackbone(channel_dims=(8, 16, 32))
    x = to_tensor(np.full((64, 64, 3), 0.5, dtype=np.float32))
    with torch.no_grad():
        feats = bb(x)
    for level, idx, value in BACKBONE_CONST_GOLDENS:
        assert feats[level][idx].item() == pytest.approx(value, abs=1e-5)


def test_backbone_deterministic_across_instances():
    x = torch.from_numpy(
        np.random.default_rng(4).uniform(size=(1, 3, 32, 32)).astype(np.float32)
    )
    with torch.no_grad():
        a = ToyBackbone()(x)
        b = ToyBackbone()(x)
    for fa, fb in zip(a, b):
        assert torch.equal(fa, fb)


def test_backbone_custom_seed_changes_weights():
    x = torch.ones(1, 3, 32, 32)
    with torch.no_grad():
        a = ToyBackbone(seed=4321)(x)
        b = ToyBackbone(seed=1)(x)
    assert not torch.allclose(a[0], b[0])


# -- prototype projector ----------------------------------------------------------


def test_projector_shapes_and_golden():
    proj = PrototypeProjector(embed_dim=8, channel_dims=(8, 16, 32))
    p = torch.full((2, 3, 8), 0.25)
    with torch.no_grad():
        outs = proj(p)
    assert [tuple(o.shape) for o in outs] == [(2, 3, 8), (2, 3, 16), (2, 3, 32)]
    sums = [o.sum().item() for o in outs]
    assert sums == pytest.approx([4.62693357, -1.46500778, 0.61098588], abs=1e-5)


def test_projector_is_trainable():
    proj = PrototypeProjector(embed_dim=8, channel_dims=(8, 16, 32))
    assert all(p.requires_grad for p in proj.parameters())


def test_projector_gradient_matches_finite_differences():
    torch.manual_seed(0)
    proj = PrototypeProjector(embed_dim=4, channel_dims=(4, 8, 16)).double()
    p = torch.randn(2, 2, 4, dtype=torch.float64)

    def loss_value():
        return sum(o.pow(2).sum() for o in proj(p))

    loss_value().backward()
    weight = proj.levels[0][0].weight
    grad = weight.grad.clone()
    eps = 1e-6
    for idx in [(0, 0), (1, 2), (3, 3)]:
        with torch.no_grad():
            weight[idx] += eps
            up = loss_value().item()
            weight[idx] -= 2 * eps
            down = loss_value().item()
            weight[idx] += eps
        fd = (up - down) / (2 * eps)
        assert grad[idx].item() == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_projector_deterministic_by_seed():
    p = torch.randn(1, 2, 8, generator=torch.Generator().manual_seed(0))
    a = PrototypeProjector(8, (8, 16, 32), seed=99)
    b = PrototypeProjector(8, (8, 16, 32), seed=99)
    c = PrototypeProjector(8, (8, 16, 32), seed=100)
    with torch.no_grad():
        assert all(torch.equal(x, y) for x, y in zip(a(p), b(p)))
        assert not torch.equal(a(p)[0], c(p)[0])


def test_pretrained_adapter_is_placeholder():
    with pytest.raises((ImportError, NotImplementedError)):
        PretrainedEncoderAdapter("some-backbone")
