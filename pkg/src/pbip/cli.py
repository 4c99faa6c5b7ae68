"""Command-line entry point.

Subcommands: synth, build-bank, train, export, eval, zeroshot, ablate,
overlay, stage2. Every data-reading command resolves its root from --root or
the PBIP_DATA_ROOT environment variable. Config precedence: built-in
defaults < --config file < individual flags. Output directories receive a
config.lock snapshot of the effective configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablate import PARAMETERS, AblationSpec, run_ablation
from .bank import ImageBank, build_bank
from .config import TrainConfig, write_lockfile
from .data import load_manifest, load_mask, save_image
from .encoders import ToyEmbedder
from .metrics import evaluate_mask_pairs
from .overlay import render_overlays
from .synthetic import SyntheticSpec, generate_synthetic
from .train import (
    build_models,
    export_pseudo_masks,
    load_checkpoint,
    stage2_hook,
    train_stage1,
)
from .zeroshot import save_report, zeroshot_eval


def _resolve_root(args) -> Path:
    root = getattr(args, "root", None) or os.environ.get("PBIP_DATA_ROOT")
    if not root:
        raise SystemExit("no data root: pass --root or set PBIP_DATA_ROOT")
    return Path(root)


_OVERRIDE_FIELDS = {
    "lr": float,
    "weight_decay": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "cls_weight": float,
    "sim_weight": float,
    "fg_weight": float,
    "bg_weight": float,
    "temperature": float,
    "threshold_scale": float,
    "logit_scale": float,
    "embed_dim": int,
    "clusters_per_class": int,
    "images_per_cluster": int,
    "white_level": float,
    "white_limit": float,
    "threshold_scope": str,
    "cls_loss_mode": str,
    "sim_score_mode": str,
    "fg_weight_norm": str,
    "mask_head": str,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key=value config file")
    for name, typ in _OVERRIDE_FIELDS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    parser.add_argument("--channel-dims", type=str, default=None, help="e.g. 8,16,32")
    parser.add_argument("--level-weights", type=str, default=None, help="e.g. 1,1,1")
    parser.add_argument("--no-adaptive-threshold", action="store_true")
    parser.add_argument("--no-augment", action="store_true")
    parser.add_argument("--no-gate-export", action="store_true")


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for name in _OVERRIDE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.channel_dims:
        overrides["channel_dims"] = tuple(int(v) for v in args.channel_dims.split(","))
    if args.level_weights:
        overrides["level_weights"] = tuple(float(v) for v in args.level_weights.split(","))
    if args.no_adaptive_threshold:
        overrides["use_adaptive_threshold"] = False
    if args.no_augment:
        overrides["augment"] = False
    if args.no_gate_export:
        overrides["gate_export_by_label"] = False
    return cfg.replace(**overrides)


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        patch_size=args.size,
        train_per_class=args.train_per_class,
        val_patches=args.val,
        test_patches=args.test,
        variants_per_class=args.variants,
        white_patches=args.white,
        seed=args.seed,
    )
    root = generate_synthetic(spec, args.out)
    print(f"wrote synthetic dataset to {root}")
    return 0


def cmd_build_bank(args) -> int:
    manifest = load_manifest(_resolve_root(args))
    encoder = ToyEmbedder(args.embed_dim)
    bank = build_bank(
        manifest,
        encoder,
        clusters_per_class=args.k,
        images_per_cluster=args.nk,
        white_level=args.white_level,
        white_limit=args.white_limit,
        seed=args.seed,
    )
    bank.save(args.out)
    print(
        f"bank: {bank.num_classes} classes x {bank.clusters_per_class} subclasses,"
        f" {len(bank.member_embeddings)} members -> {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_manifest(_resolve_root(args))
    bank = ImageBank.load(args.bank)
    state = train_stage1(
        manifest, bank, cfg, args.out, resume_from=args.resume
    )
    print(
        f"trained {state.epoch} epochs ({state.step} steps),"
        f" final loss {state.final_loss:.6f} -> {args.out}"
    )
    return 0


def _dump_debug(models, manifest, cfg, debug_dir: Path, limit: int) -> None:
    import torch

    from .encoders import to_tensor
    from .matchnet import adaptive_threshold, aggregate_masks, separate

    debug_dir.mkdir(parents=True, exist_ok=True)
    records = manifest.train[:limit]
    for rec in records:
        with torch.no_grad():
            x = to_tensor(rec.image())
            masks = models.simnet(x)
            agg = aggregate_masks(masks, x.shape[-2:])
            thresholds = (
                adaptive_threshold(agg, cfg.threshold_scale, cfg.threshold_scope)
                if cfg.use_adaptive_threshold
                else agg.new_zeros(agg.shape[:2])
            )
            labels = torch.from_numpy(rec.labels[None, :])
            sep = separate(agg, thresholds, x, labels, cfg.fg_weight_norm)
        for lvl, m in enumerate(masks):
            for cls in range(m.shape[1]):
                heat = (m[0, cls].numpy() + 1.0) / 2.0
                save_image(
                    debug_dir / f"{rec.patch_id}_level{lvl}_class{cls}_mask.png",
                    np.repeat(heat[:, :, None], 3, axis=2),
                )
        for cls in range(sep.fg_images.shape[1]):
            fg = sep.fg_images[0, cls].permute(1, 2, 0).numpy()
            bg = sep.bg_images[0, cls].permute(1, 2, 0).numpy()
            save_image(debug_dir / f"{rec.patch_id}_class{cls}_fg.png", fg)
            save_image(debug_dir / f"{rec.patch_id}_class{cls}_bg.png", bg)


def cmd_export(args) -> int:
    manifest = load_manifest(_resolve_root(args))
    bank = ImageBank.load(args.bank)
    models, _, _, cfg = load_checkpoint(args.ckpt, bank)
    if args.no_gate_export:
        cfg = cfg.replace(gate_export_by_label=False)
    written = export_pseudo_masks(
        models, manifest, args.out,
        gate_by_label=cfg.gate_export_by_label, split=args.split,
    )
    write_lockfile(cfg, args.out)
    if args.debug_dump:
        _dump_debug(models, manifest, cfg, Path(args.debug_dump), args.debug_limit)
    print(f"exported {len(written)} pseudo-masks -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    class_names = None
    ignore_value = args.ignore_value
    root = getattr(args, "root", None) or os.environ.get("PBIP_DATA_ROOT")
    if args.num_classes:
        class_names = [f"class_{i}" for i in range(args.num_classes)]
    elif root:
        manifest = load_manifest(root)
        class_names = manifest.class_names
        if ignore_value is None:
            ignore_value = manifest.ignore_value
    pairs = []
    max_seen = 0
    for gt_path in sorted(gt_dir.glob("*.png")):
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            print(f"warning: no prediction for {gt_path.name}", file=sys.stderr)
            continue
        pred = load_mask(pred_path)
        gt = load_mask(gt_path)
        max_seen = max(max_seen, int(pred.max(initial=0)), int(gt.max(initial=0)))
        pairs.append((pred, gt))
    if class_names is None:
        class_names = [f"class_{i}" for i in range(max_seen + 1)]
    report = evaluate_mask_pairs(
        pairs, class_names, boundary_radius=args.radius, ignore_value=ignore_value
    )
    report.save(args.out)
    print(
        f"mIoU {report.miou:.4f}  FwIoU {report.fwiou:.4f}"
        f"  bIoU {report.biou:.4f}  Dice {report.mean_dice:.4f}"
        f"  ({report.num_images} images) -> {args.out}"
    )
    return 0


def cmd_zeroshot(args) -> int:
    manifest = load_manifest(_resolve_root(args))
    bank = ImageBank.load(args.bank)
    encoder = ToyEmbedder(bank.embed_dim)
    report = zeroshot_eval(
        manifest.split(args.split), encoder, bank.prototype_matrix(), bank.class_names
    )
    save_report(report, args.out)
    print(
        f"zero-shot macro F1 {report['macro_f1']:.4f}, accuracy"
        f" {report['accuracy']:.4f} on {report['num_evaluated']} patches -> {args.out}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    parameter = args.param
    if PARAMETERS.get(parameter, ()) is None:
        values = [float(v) if "." in v else int(v) for v in args.values.split(",")]
    else:
        values = args.values.split(",")
    spec = AblationSpec(
        parameter=parameter,
        values=values,
        seeds=[int(s) for s in args.seeds.split(",")],
    )
    rows = run_ablation(
        spec, cfg, _resolve_root(args), args.out, parallel=args.parallel
    )
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} runs, {len(failed)} failed -> {args.out}")
    print((Path(args.out) / "results.tsv").read_text(encoding="utf-8"), end="")
    return 0


def cmd_overlay(args) -> int:
    written = render_overlays(
        args.masks, args.images, args.out,
        alpha=args.alpha, ignore_value=args.ignore_value,
    )
    print(f"wrote {len(written)} overlays -> {args.out}")
    return 0


def cmd_stage2(args) -> int:
    code = stage2_hook(args.masks, args.images, args.out, args.command)
    if code != 0:
        print(f"stage-2 trainer exited with status {code}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pbip",
        description="Prototype-based image prompting for weakly supervised segmentation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic textured dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train-per-class", type=int, default=50)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--variants", type=int, default=3)
    p.add_argument("--white", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-bank", help="cluster single-class patches into a bank")
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--k", type=int, default=3, help="subclasses per class")
    p.add_argument("--nk", type=int, default=100, help="prototypes kept per subclass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--white-level", type=float, default=0.86)
    p.add_argument("--white-limit", type=float, default=0.70)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("train", help="run stage-1 training")
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="export argmax pseudo-masks from a checkpoint")
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--no-gate-export", action="store_true")
    p.add_argument("--debug-dump", type=Path, default=None,
                   help="also write per-level mask heatmaps and FG/BG region images")
    p.add_argument("--debug-limit", type=int, default=2)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--radius", type=int, default=2, help="boundary IoU band radius")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--ignore-value", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", help="prototype zero-shot classification report")
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("ablate", help="sweep one knob across values and seeds")
    p.add_argument("--root", type=Path, default=None)
    p.add_argument("--param", required=True, choices=sorted(PARAMETERS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--parallel", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlay", help="render class-colored mask overlays")
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("--ignore-value", type=int, default=None)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("stage2", help="invoke an external stage-2 trainer")
    p.add_argument("--masks", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--command", required=True, help="external trainer command prefix")
    p.set_defaults(func=cmd_stage2)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
