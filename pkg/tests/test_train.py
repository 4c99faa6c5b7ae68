import math
import re
import types

import numpy as np
import pytest
import torch

from pbip.data import DataError, load_mask
from pbip.encoders import ToyEmbedder
from pbip.train import (
    TrainError,
    TrainState,
    build_models,
    export_pseudo_masks,
    export_record_mask,
    hook_argv,
    label_gated_argmax,
    load_checkpoint,
    make_optimizer,
    predict_aggregate,
    save_checkpoint,
    stage2_hook,
    step_losses,
    total_loss,
    train_stage1,
    _stack_batch,
)

from conftest import tiny_config

LOG_LINE = re.compile(r"^(\d+)\t(\d+\.\d{6})\t(\d+\.\d{6})\t(\d+\.\d{6})$")


def read_log(out_dir):
    lines = (out_dir / "train.log").read_text(encoding="utf-8").splitlines()
    parsed = []
    for line in lines:
        m = LOG_LINE.match(line)
        assert m is not None, f"malformed log line: {line!r}"
        parsed.append((int(m[1]), float(m[2]), float(m[3]), float(m[4])))
    return parsed


class TestTotalLoss:
    def test_weighted_sum(self):
        cfg = tiny_config(cls_weight=1.0, sim_weight=0.5)
        l_cls = torch.tensor(0.6, dtype=torch.float64)
        l_sim = torch.tensor(0.4, dtype=torch.float64)
        assert float(total_loss(l_cls, l_sim, cfg)) == pytest.approx(0.8, abs=1e-12)

    def test_sim_weight_zero_drops_similarity(self):
        cfg = tiny_config(cls_weight=2.0, sim_weight=0.0)
        l_cls = torch.tensor(0.3, dtype=torch.float64)
        l_sim = torch.tensor(123.0, dtype=torch.float64)
        assert float(total_loss(l_cls, l_sim, cfg)) == pytest.approx(0.6, abs=1e-12)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite_raises(self, bad):
        cfg = tiny_config()
        with pytest.raises(TrainError, match="non-finite"):
            total_loss(torch.tensor(bad), torch.tensor(0.0), cfg)


class TestLabelGatedArgmax:
    def test_gating_removes_absent_classes(self):
        agg = np.stack([
            np.full((1, 2), 0.9),
            np.array([[0.1, 0.95]]),
        ])
        assert label_gated_argmax(agg, np.array([1, 0])).tolist() == [[0, 0]]
        assert label_gated_argmax(agg, np.array([0, 1])).tolist() == [[1, 1]]
        assert label_gated_argmax(agg, np.array([1, 1])).tolist() == [[0, 1]]

    def test_ungated_is_plain_argmax(self):
        rng = np.random.default_rng(3)
        agg = rng.normal(size=(4, 5, 6))
        out = label_gated_argmax(agg)
        assert out.dtype == np.uint8
        np.testing.assert_array_equal(out, agg.argmax(axis=0))

    def test_all_zero_label_rejected(self):
        agg = np.zeros((2, 3, 3))
        with pytest.raises(TrainError, match="all-zero"):
            label_gated_argmax(agg, np.array([0, 0]))


class TestStackBatch:
    def test_stacks_to_channel_first(self):
        a = np.zeros((4, 6, 3), dtype=np.float32)
        a[1, 2, 0] = 0.5
        b = np.ones((4, 6, 3), dtype=np.float32)
        batch = _stack_batch([a, b])
        assert batch.shape == (2, 3, 4, 6)
        assert batch.dtype == torch.float32
        assert float(batch[0, 0, 1, 2]) == 0.5
        assert float(batch[1].min()) == 1.0

    def test_mixed_sizes_rejected(self):
        imgs = [np.zeros((4, 4, 3)), np.zeros((8, 8, 3))]
        with pytest.raises(DataError, match="share a size"):
            _stack_batch(imgs)


class TestBuildModels:
    def test_embed_dim_mismatch(self, small_bank):
        enc = ToyEmbedder(embed_dim=16)
        with pytest.raises(TrainError, match="32-dim.*16-dim"):
            build_models(small_bank, tiny_config(), encoder=enc)

    def test_prototype_head_shares_projector(self, small_bank):
        models = build_models(small_bank, tiny_config(mask_head="prototype_sim"))
        assert models.simnet.projector is models.match_projector
        params = models.trainable_parameters()
        assert len(params) == len({id(p) for p in params})
        assert {id(p) for p in params} == {
            id(p) for p in models.simnet.parameters() if p.requires_grad
        }

    def test_conv_head_gets_own_projector(self, small_bank):
        models = build_models(small_bank, tiny_config(mask_head="conv1x1"))
        assert models.simnet.projector is None
        assert models.match_projector is not None
        ids = {id(p) for p in models.trainable_parameters()}
        for p in models.match_projector.parameters():
            assert id(p) in ids

    def test_projected_prototypes_levels(self, small_bank):
        cfg = tiny_config()
        models = build_models(small_bank, cfg)
        protos = models.projected_prototypes()
        assert len(protos) == len(cfg.channel_dims)
        for t, dim in zip(protos, cfg.channel_dims):
            assert t.shape == (small_bank.num_classes, 3, dim)


def test_make_optimizer(small_bank):
    cfg = tiny_config(lr=2e-4, weight_decay=0.01)
    models = build_models(small_bank, cfg)
    opt = make_optimizer(models, cfg)
    assert isinstance(opt, torch.optim.AdamW)
    assert opt.param_groups[0]["lr"] == 2e-4
    assert opt.param_groups[0]["weight_decay"] == 0.01
    assert len(opt.param_groups[0]["params"]) == len(models.trainable_parameters())


class TestStepLosses:
    def test_sim_weight_zero_short_circuits(self, small_bank, small_manifest):
        cfg = tiny_config(sim_weight=0.0)
        models = build_models(small_bank, cfg)
        recs = small_manifest.train[:2]
        x = _stack_batch([r.image() for r in recs])
        y = torch.from_numpy(np.stack([r.labels for r in recs]))
        l_cls, l_sim, total = step_losses(models, x, y, cfg)
        assert float(l_sim) == 0.0
        assert l_sim.grad_fn is None
        assert float(total.detach()) == pytest.approx(
            float(l_cls.detach()) * cfg.cls_weight, rel=1e-6
        )

    def test_losses_finite_and_nonnegative(self, small_bank, small_manifest):
        cfg = tiny_config()
        models = build_models(small_bank, cfg)
        recs = small_manifest.train[:3]
        x = _stack_batch([r.image() for r in recs])
        y = torch.from_numpy(np.stack([r.labels for r in recs]))
        l_cls, l_sim, total = step_losses(models, x, y, cfg)
        for t in (l_cls, l_sim, total):
            assert torch.isfinite(t.detach())
            assert float(t.detach()) >= 0.0


class TestTrainStage1:
    def test_state_fields(self, trained):
        _, state, _, cfg = trained
        assert state.epoch == cfg.epochs == 2
        # 30 train records, batch 4 -> 8 batches/epoch
        assert state.step == 16
        assert math.isfinite(state.final_loss) and state.final_loss > 0
        assert state.config_hash == cfg.hash()

    def test_log_format_and_step_sequence(self, trained):
        _, state, out_dir, cfg = trained
        rows = read_log(out_dir)
        assert [r[0] for r in rows] == list(range(1, state.step + 1))
        assert rows[-1][3] == pytest.approx(state.final_loss, abs=5e-7)
        for _, l_cls, l_sim, l_tot in rows:
            assert l_tot == pytest.approx(
                cfg.cls_weight * l_cls + cfg.sim_weight * l_sim, abs=2e-6
            )

    def test_loss_decreases_across_epochs(self, trained):
        _, state, out_dir, _ = trained
        rows = read_log(out_dir)
        half = state.step // 2
        first = sum(r[3] for r in rows[:half]) / half
        last = sum(r[3] for r in rows[half:]) / half
        assert last < first

    def test_lockfile_matches_config(self, trained):
        _, _, out_dir, cfg = trained
        assert (out_dir / "config.lock").read_text(encoding="utf-8") == cfg.to_text()

    def test_checkpoint_files(self, trained):
        _, _, out_dir, cfg = trained
        for epoch in range(cfg.epochs + 1):
            assert (out_dir / f"ckpt_epoch_{epoch}.pt").exists()
        assert (out_dir / "ckpt.pt").exists()

    def test_encoder_stays_frozen(self, trained):
        models, _, _, _ = trained
        fresh = ToyEmbedder(embed_dim=32)
        for k, v in fresh.state_dict().items():
            assert torch.equal(v, models.encoder.state_dict()[k])

    def test_class_count_mismatch(self, small_bank, tmp_path):
        fake = types.SimpleNamespace(num_classes=5)
        with pytest.raises(TrainError, match="5 classes.*3"):
            train_stage1(fake, small_bank, tiny_config(), tmp_path)


class TestCheckpoints:
    def test_round_trip(self, trained, small_bank):
        models, state, out_dir, cfg = trained
        loaded_models, optimizer, loaded_state, loaded_cfg = load_checkpoint(
            out_dir / "ckpt.pt", small_bank
        )
        assert loaded_state == state
        assert loaded_cfg.hash() == cfg.hash()
        for k, v in models.simnet.state_dict().items():
            assert torch.equal(v, loaded_models.simnet.state_dict()[k])
        assert optimizer.param_groups[0]["lr"] == cfg.lr

    def test_payload_meta(self, trained):
        _, _, out_dir, cfg = trained
        payload = torch.load(out_dir / "ckpt.pt", map_location="cpu", weights_only=False)
        assert set(payload) == {"simnet", "optimizer", "state", "meta"}
        meta = payload["meta"]
        assert meta["embed_dim"] == 32
        assert meta["num_classes"] == 3
        assert meta["clusters_per_class"] == 3
        assert meta["config_hash"] == cfg.hash()
        assert meta["config_text"] == cfg.to_text()

    def test_conv_head_payload_has_projector(self, small_bank, tmp_path):
        cfg = tiny_config(mask_head="conv1x1")
        models = build_models(small_bank, cfg)
        opt = make_optimizer(models, cfg)
        state = TrainState(epoch=0, step=0, best_val=0.0, final_loss=1.0, config_hash=cfg.hash())
        save_checkpoint(tmp_path / "c.pt", models, opt, state, cfg)
        payload = torch.load(tmp_path / "c.pt", map_location="cpu", weights_only=False)
        assert "match_projector" in payload


def test_resume_reproduces_uninterrupted_run(small_manifest, small_bank, tmp_path):
    """Resuming from an epoch boundary must replay the longer run exactly."""
    cfg4 = tiny_config(epochs=4)
    out_a = tmp_path / "straight"
    train_stage1(small_manifest, small_bank, cfg4, out_a)

    out_b = tmp_path / "resumed"
    train_stage1(small_manifest, small_bank, tiny_config(epochs=2), out_b)
    train_stage1(
        small_manifest, small_bank, cfg4, out_b,
        resume_from=out_b / "ckpt_epoch_2.pt",
    )

    log_a = (out_a / "train.log").read_text(encoding="utf-8")
    log_b = (out_b / "train.log").read_text(encoding="utf-8")
    assert log_a == log_b

    final_a = torch.load(out_a / "ckpt.pt", map_location="cpu", weights_only=False)
    final_b = torch.load(out_b / "ckpt.pt", map_location="cpu", weights_only=False)
    for k, v in final_a["simnet"].items():
        assert torch.equal(v, final_b["simnet"][k])


def test_divergence_writes_rescue_checkpoint(
    small_manifest, small_bank, tmp_path, monkeypatch
):
    def explode(*args, **kwargs):
        raise TrainError("non-finite loss: injected")

    monkeypatch.setattr("pbip.train.step_losses", explode)
    with pytest.raises(TrainError, match="injected"):
        train_stage1(small_manifest, small_bank, tiny_config(), tmp_path)
    assert (tmp_path / "ckpt_diverged.pt").exists()


class TestExport:
    def test_predict_aggregate_shape_and_range(self, trained, small_manifest):
        models = trained[0]
        agg = predict_aggregate(models, small_manifest.train[0].image())
        assert agg.shape == (3, 32, 32)
        assert np.isfinite(agg).all()
        assert np.abs(agg).max() <= 3.0 + 1e-6

    def test_gated_single_class_record_is_constant(self, trained, small_manifest):
        models = trained[0]
        record = next(r for r in small_manifest.train if r.is_single_class())
        mask = export_record_mask(models, record, gate_by_label=True)
        assert set(np.unique(mask)) == {record.present_classes()[0]}

    def test_gated_masks_respect_labels(self, trained, small_manifest, tmp_path):
        models = trained[0]
        written = export_pseudo_masks(models, small_manifest, tmp_path)
        assert len(written) == len(small_manifest.train)
        listed = (tmp_path / "exported.txt").read_text(encoding="utf-8").splitlines()
        assert listed == [p.name for p in written]
        by_id = {r.patch_id: r for r in small_manifest.train}
        for path in written:
            mask = load_mask(path)
            assert mask.shape == (32, 32)
            present = set(np.flatnonzero(by_id[path.stem].labels))
            assert set(np.unique(mask)) <= present

    def test_ungated_export(self, trained, small_manifest):
        models = trained[0]
        mask = export_record_mask(models, small_manifest.train[0], gate_by_label=False)
        assert mask.dtype == np.uint8
        assert mask.max() < 3


class TestStage2Hook:
    def test_argv_layout(self):
        argv = hook_argv("m", "i", "o", "python3 trainer.py --flag 'a b'")
        assert argv == ["python3", "trainer.py", "--flag", "a b", "m", "i", "o"]

    def test_runs_command_and_returns_status(self, tmp_path):
        masks = tmp_path / "masks"
        images = tmp_path / "imgs"
        masks.mkdir()
        images.mkdir()
        assert stage2_hook(masks, images, tmp_path / "out", "true") == 0
        assert stage2_hook(masks, images, tmp_path / "out", "false") == 1

    def test_missing_dirs_fail_before_invocation(self, tmp_path):
        present = tmp_path / "p"
        present.mkdir()
        with pytest.raises(FileNotFoundError, match="pseudo-mask"):
            stage2_hook(tmp_path / "nope", present, tmp_path / "o", "/no/such/cmd")
        with pytest.raises(FileNotFoundError, match="image directory"):
            stage2_hook(present, tmp_path / "nope", tmp_path / "o", "/no/such/cmd")
