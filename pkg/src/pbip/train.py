"""Stage-1 training: joint classification + similarity objective.

One step runs the backbone to per-level masks, pools them for the
classification loss, then (when the similarity weight is nonzero) aggregates
and thresholds the masks, separates per-class regions, and adds the
contrastive similarity loss. Checkpoints are written per epoch; resuming at
an epoch boundary reproduces the uninterrupted run exactly because all
shuffling and augmentation derive functionally from (seed, epoch).
"""

from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .bank import ImageBank
from .config import TrainConfig, write_lockfile
from .data import DataError, DatasetManifest, PatchRecord, iterate_batches, save_mask
from .encoders import PrototypeProjector, ToyBackbone, ToyEmbedder, to_tensor
from .matchnet import MatchNet, batch_similarity_terms, similarity_loss, aggregate_masks
from .simnet import SimilarityNet, classification_loss, pooled_predictions


class TrainError(RuntimeError):
    """Raised on divergence or inconsistent training inputs."""


def total_loss(l_cls: torch.Tensor, l_sim: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Weighted sum of the classification and similarity objectives."""
    out = cfg.cls_weight * l_cls + cfg.sim_weight * l_sim
    if not torch.isfinite(out):
        raise TrainError(
            f"non-finite loss: cls={float(l_cls)!r} sim={float(l_sim)!r}"
        )
    return out


@dataclass
class PipelineModels:
    """Everything the pipeline trains or freezes, wired together."""

    encoder: ToyEmbedder
    simnet: SimilarityNet
    matchnet: MatchNet
    match_projector: PrototypeProjector

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = [p for p in self.simnet.parameters() if p.requires_grad]
        if self.simnet.projector is not self.match_projector:
            params += [p for p in self.match_projector.parameters() if p.requires_grad]
        return params

    def projected_prototypes(self) -> list[torch.Tensor]:
        protos = self.simnet.prototypes
        return self.match_projector(protos)


def build_models(bank: ImageBank, cfg: TrainConfig, encoder: ToyEmbedder | None = None) -> PipelineModels:
    encoder = encoder if encoder is not None else ToyEmbedder(cfg.embed_dim)
    if encoder.embed_dim != bank.embed_dim:
        raise TrainError(
            f"bank embeddings are {bank.embed_dim}-dim but the encoder emits"
            f" {encoder.embed_dim}-dim features"
        )
    simnet = SimilarityNet(
        bank.num_classes,
        bank.prototype_matrix(),
        cfg.channel_dims,
        mask_head=cfg.mask_head,
        seed=cfg.seed,
    )
    if simnet.projector is not None:
        match_projector = simnet.projector
    else:
        match_projector = PrototypeProjector(bank.embed_dim, cfg.channel_dims, seed=99 + cfg.seed)
    matchnet = MatchNet(encoder, match_projector)
    return PipelineModels(
        encoder=encoder, simnet=simnet, matchnet=matchnet, match_projector=match_projector
    )


@dataclass
class TrainState:
    """Resumable snapshot: completed epochs, step count, best val metric."""

    epoch: int
    step: int
    best_val: float
    final_loss: float
    config_hash: str


def _checkpoint_payload(models: PipelineModels, optimizer, state: TrainState, cfg: TrainConfig) -> dict:
    payload = {
        "simnet": models.simnet.state_dict(),
        "optimizer": optimizer.state_dict(),
        "state": vars(state).copy(),
        "meta": {
            "channel_dims": list(cfg.channel_dims),
            "embed_dim": models.encoder.embed_dim,
            "num_classes": models.simnet.num_classes,
            "clusters_per_class": int(models.simnet.prototypes.shape[1]),
            "config_hash": cfg.hash(),
            "config_text": cfg.to_text(),
        },
    }
    if models.simnet.projector is not models.match_projector:
        payload["match_projector"] = models.match_projector.state_dict()
    return payload


def save_checkpoint(path: Path | str, models: PipelineModels, optimizer, state: TrainState, cfg: TrainConfig) -> None:
    torch.save(_checkpoint_payload(models, optimizer, state, cfg), path)


def load_checkpoint(path: Path | str, bank: ImageBank, cfg: TrainConfig | None = None):
    """Rebuild models + optimizer + state from a checkpoint file."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if cfg is None:
        cfg = TrainConfig.from_text(payload["meta"]["config_text"])
    models = build_models(bank, cfg)
    models.simnet.load_state_dict(payload["simnet"])
    if "match_projector" in payload:
        models.match_projector.load_state_dict(payload["match_projector"])
    optimizer = make_optimizer(models, cfg)
    optimizer.load_state_dict(payload["optimizer"])
    state = TrainState(**payload["state"])
    return models, optimizer, state, cfg


def make_optimizer(models: PipelineModels, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        models.trainable_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )


def _stack_batch(images: list[np.ndarray]) -> torch.Tensor:
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DataError(f"images in one batch must share a size, got {sorted(shapes)}")
    return torch.from_numpy(np.stack(images)).float().permute(0, 3, 1, 2)


def step_losses(
    models: PipelineModels,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(l_cls, l_sim, l_total) for one batch."""
    masks = models.simnet(images)
    l_cls = classification_loss(
        pooled_predictions(masks), labels, cfg.logit_scale, cfg.level_weights, cfg.cls_loss_mode
    )
    if cfg.sim_weight > 0:
        _, feats = models.matchnet(
            masks,
            images,
            labels,
            threshold_scale=cfg.threshold_scale,
            threshold_scope=cfg.threshold_scope,
            weight_norm=cfg.fg_weight_norm,
            use_adaptive_threshold=cfg.use_adaptive_threshold,
        )
        fgs, bgs = batch_similarity_terms(
            feats, models.projected_prototypes(), cfg.temperature, cfg.sim_score_mode
        )
        l_sim = similarity_loss(fgs, bgs, cfg.fg_weight, cfg.bg_weight)
    else:
        l_sim = l_cls.detach() * 0.0
    return l_cls, l_sim, total_loss(l_cls, l_sim, cfg)


def train_stage1(
    manifest: DatasetManifest,
    bank: ImageBank,
    cfg: TrainConfig,
    out_dir: Path | str,
    models: PipelineModels | None = None,
    resume_from: Path | str | None = None,
) -> TrainState:
    """Run the stage-1 loop, writing per-epoch checkpoints and a loss log."""
    if manifest.num_classes != bank.num_classes:
        raise TrainError(
            f"manifest has {manifest.num_classes} classes, bank has {bank.num_classes}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_lockfile(cfg, out_dir)
    torch.manual_seed(cfg.seed)

    if resume_from is not None:
        models, optimizer, state, cfg = load_checkpoint(resume_from, bank, cfg)
        start_epoch = state.epoch
    else:
        models = models if models is not None else build_models(bank, cfg)
        optimizer = make_optimizer(models, cfg)
        state = TrainState(epoch=0, step=0, best_val=0.0, final_loss=math.inf, config_hash=cfg.hash())
        start_epoch = 0

    frozen_before = {
        k: v.clone() for k, v in models.encoder.state_dict().items()
    }
    log_path = out_dir / "train.log"
    log_mode = "a" if resume_from is not None else "w"
    last_good = out_dir / f"ckpt_epoch_{start_epoch}.pt"
    if resume_from is None:
        save_checkpoint(last_good, models, optimizer, state, cfg)

    with open(log_path, log_mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            for _, images, labels in iterate_batches(
                manifest.train, cfg.batch_size, cfg.seed, epoch, cfg.augment
            ):
                x = _stack_batch(images)
                y = torch.from_numpy(labels)
                try:
                    l_cls, l_sim, loss = step_losses(models, x, y, cfg)
                except TrainError:
                    save_checkpoint(out_dir / "ckpt_diverged.pt", models, optimizer, state, cfg)
                    raise
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                state.step += 1
                state.final_loss = float(loss.detach())
                log.write(
                    f"{state.step}\t{float(l_cls.detach()):.6f}"
                    f"\t{float(l_sim.detach()):.6f}\t{state.final_loss:.6f}\n"
                )
            state.epoch = epoch + 1
            last_good = out_dir / f"ckpt_epoch_{state.epoch}.pt"
            save_checkpoint(last_good, models, optimizer, state, cfg)

    frozen_after = models.encoder.state_dict()
    for k, v in frozen_before.items():
        if not torch.equal(v, frozen_after[k]):
            raise TrainError(f"frozen encoder parameter {k} changed during training")
    save_checkpoint(out_dir / "ckpt.pt", models, optimizer, state, cfg)
    return state


def predict_aggregate(models: PipelineModels, image: np.ndarray) -> np.ndarray:
    """Aggregate multi-level mask for one image, as (N, H, W) float array."""
    with torch.no_grad():
        x = to_tensor(image)
        masks = models.simnet(x)
        agg = aggregate_masks(masks, x.shape[-2:])
    return agg.squeeze(0).numpy()


def label_gated_argmax(
    aggregate: np.ndarray,
    labels: np.ndarray | None = None,
) -> np.ndarray:
    """Argmax over class channels; with labels, absent classes cannot win."""
    if labels is not None:
        labels = np.asarray(labels)
        if labels.sum() == 0:
            raise TrainError("cannot gate the argmax with an all-zero label")
        aggregate = np.where(labels[:, None, None] > 0, aggregate, -np.inf)
    return aggregate.argmax(axis=0).astype(np.uint8)


def export_record_mask(
    models: PipelineModels,
    record: PatchRecord,
    gate_by_label: bool = True,
) -> np.ndarray:
    """Argmax pseudo-mask for one record, optionally label-gated.

    With gating, classes absent from the image-level label are removed from
    the argmax competition.
    """
    agg = predict_aggregate(models, record.image())
    return label_gated_argmax(agg, record.labels if gate_by_label else None)


def export_pseudo_masks(
    models: PipelineModels,
    manifest: DatasetManifest,
    out_dir: Path | str,
    gate_by_label: bool = True,
    split: str = "train",
) -> list[Path]:
    """Write one argmax pseudo-mask PNG per record of ``split``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for record in manifest.split(split):
        mask = export_record_mask(models, record, gate_by_label)
        path = out_dir / f"{record.patch_id}.png"
        save_mask(path, mask)
        written.append(path)
    index = out_dir / "exported.txt"
    index.write_text(
        "".join(f"{p.name}\n" for p in written), encoding="utf-8"
    )
    return written


def stage2_hook(
    mask_dir: Path | str,
    image_dir: Path | str,
    out_dir: Path | str,
    trainer_command: str,
) -> int:
    """Invoke an external stage-2 trainer as ``cmd <masks> <images> <out>``.

    The stage-2 model itself is out of scope; this only shells out and
    propagates the exit status.
    """
    mask_dir = Path(mask_dir)
    image_dir = Path(image_dir)
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"pseudo-mask directory not found: {mask_dir}")
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    argv = shlex.split(trainer_command) + [str(mask_dir), str(image_dir), str(out_dir)]
    return subprocess.run(argv, check=False).returncode


def hook_argv(mask_dir, image_dir, out_dir, trainer_command: str) -> list[str]:
    """The exact argument vector ``stage2_hook`` would execute."""
    return shlex.split(trainer_command) + [str(mask_dir), str(image_dir), str(out_dir)]
