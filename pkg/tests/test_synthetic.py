import hashlib
from pathlib import Path

import numpy as np
import pytest

from pbip.data import load_manifest, load_mask, parse_label_name, white_fraction
from pbip.synthetic import SyntheticSpec, generate_synthetic, mosaic_patch

from conftest import SMALL_SPEC


def tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(patch_size=50)  # not divisible by 16
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=1)
    with pytest.raises(ValueError):
        SyntheticSpec(train_per_class=0)
    with pytest.raises(ValueError):
        SyntheticSpec(variants_per_class=0)


def test_generated_tree_layout(small_root):
    n = SMALL_SPEC.num_classes
    train_files = sorted((small_root / "train").glob("*.png"))
    assert len(train_files) == n * (SMALL_SPEC.train_per_class + SMALL_SPEC.white_patches)
    assert len(list((small_root / "val" / "img").glob("*.png"))) == SMALL_SPEC.val_patches
    assert len(list((small_root / "val" / "mask").glob("*.png"))) == SMALL_SPEC.val_patches
    assert len(list((small_root / "test" / "img").glob("*.png"))) == SMALL_SPEC.test_patches
    names = (small_root / "classes.txt").read_text().split()
    assert len(names) == n
    assert (small_root / "labels.tsv").exists()


def test_train_filenames_carry_single_class_labels(small_root):
    for path in (small_root / "train").glob("*.png"):
        pid, labels = parse_label_name(path.stem)
        assert labels.sum() == 1
        cls = int(pid.split("_")[1])
        assert labels[cls] == 1


def test_generation_is_byte_deterministic(tmp_path):
    spec = SyntheticSpec(
        num_classes=2, patch_size=32, train_per_class=4, val_patches=3, seed=5
    )
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(spec, a)
    generate_synthetic(spec, b)
    da, db = tree_digest(a), tree_digest(b)
    assert da == db
    assert len(da) > 0


def test_different_seed_changes_pixels(tmp_path):
    base = SyntheticSpec(num_classes=2, patch_size=32, train_per_class=4, val_patches=3)
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(base, a)
    generate_synthetic(
        SyntheticSpec(num_classes=2, patch_size=32, train_per_class=4, val_patches=3, seed=9),
        b,
    )
    assert tree_digest(a) != tree_digest(b)


def test_gt_partitions_every_pixel(small_manifest):
    n = SMALL_SPEC.num_classes
    for rec in small_manifest.val:
        mask = rec.mask()
        assert mask.min() >= 0
        assert mask.max() < n


def test_val_labels_match_mask_contents(small_root, small_manifest):
    for rec in small_manifest.val:
        present = set(np.unique(rec.mask()).tolist())
        labeled = {i for i, v in enumerate(rec.labels) if v == 1}
        assert labeled == present


def test_white_patches_are_white(small_manifest):
    white = [r for r in small_manifest.train if r.patch_id.startswith("wh_")]
    assert len(white) == SMALL_SPEC.num_classes * SMALL_SPEC.white_patches
    for rec in white:
        assert white_fraction(rec.image()) > 0.9


def test_texture_patches_are_not_white(small_manifest):
    textured = [r for r in small_manifest.train if r.patch_id.startswith("tr_")]
    for rec in textured[:9]:
        assert white_fraction(rec.image()) < 0.1


def test_mosaic_patch_contract():
    spec = SyntheticSpec(num_classes=4, patch_size=32, train_per_class=2, val_patches=1)
    rng = np.random.default_rng(3)
    for _ in range(10):
        image, gt, labels = mosaic_patch(rng, spec)
        assert image.shape == (32, 32, 3)
        assert gt.shape == (32, 32)
        assert image.min() >= 0.0 and image.max() <= 1.0
        assert labels.shape == (4,)
        assert set(np.unique(gt)) == {i for i in range(4) if labels[i]}
        assert 2 <= labels.sum() <= 4


def test_mask_round_trip_via_manifest(small_root):
    m = load_manifest(small_root)
    rec = m.val[0]
    direct = load_mask(rec.mask_path)
    assert np.array_equal(direct, rec.mask())
