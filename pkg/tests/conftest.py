"""Shared fixtures: one small synthetic dataset and one short training run.

Everything heavyweight is session-scoped so the suite pays for dataset
generation, bank construction, and stage-1 training only once.
"""

import pytest

from pbip.bank import build_bank
from pbip.config import TrainConfig
from pbip.data import load_manifest
from pbip.encoders import ToyEmbedder
from pbip.synthetic import SyntheticSpec, generate_synthetic

SMALL_SPEC = SyntheticSpec(
    num_classes=3,
    patch_size=32,
    train_per_class=9,
    val_patches=8,
    test_patches=4,
    variants_per_class=3,
    white_patches=1,
    seed=7,
)


def tiny_config(**overrides) -> TrainConfig:
    """Short-run config for tests that need real training but not quality."""
    base = dict(
        lr=1e-3,
        epochs=2,
        batch_size=4,
        clusters_per_class=3,
        images_per_cluster=2,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "synth"
    generate_synthetic(SMALL_SPEC, root)
    return root


@pytest.fixture(scope="session")
def small_manifest(small_root):
    return load_manifest(small_root)


@pytest.fixture(scope="session")
def embedder():
    return ToyEmbedder(embed_dim=32)


@pytest.fixture(scope="session")
def small_bank(small_manifest, embedder):
    return build_bank(
        small_manifest, embedder, clusters_per_class=3, images_per_cluster=2
    )


@pytest.fixture(scope="session")
def trained(small_manifest, small_bank, tmp_path_factory):
    """(models, state, out_dir, cfg) after a two-epoch stage-1 run."""
    from pbip.train import build_models, train_stage1

    cfg = tiny_config()
    out_dir = tmp_path_factory.mktemp("run")
    models = build_models(small_bank, cfg)
    state = train_stage1(small_manifest, small_bank, cfg, out_dir, models=models)
    return models, state, out_dir, cfg
