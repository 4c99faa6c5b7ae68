"""Ablation harness: sweep one knob across values and seeds, end to end.

Each run builds a bank, trains, exports gated pseudo-masks for the val
split, and scores mean IoU. Failed runs are recorded with their error and do
not stop the sweep.
"""

from __future__ import annotations

import json
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .bank import build_bank
from .config import ConfigError, TrainConfig
from .data import load_manifest
from .encoders import ToyEmbedder
from .metrics import evaluate_mask_pairs, summarize_seed_runs
from .train import build_models, export_record_mask, train_stage1

# knob name -> allowed string values (None = numeric)
PARAMETERS = {
    "clusters": None,            # subclasses per class
    "bank-size": None,           # prototypes kept per subclass
    "sim-ratio": None,           # similarity weight relative to classification
    "bg-ratio": None,            # background term weight relative to foreground
    "losses": ("full", "no_fgs", "no_bgs", "cls_only"),
    "module": ("full", "no_sim", "no_at"),
}


@dataclass
class AblationSpec:
    parameter: str
    values: list
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self) -> None:
        if self.parameter not in PARAMETERS:
            raise ConfigError(
                f"unknown ablation parameter {self.parameter!r};"
                f" choose from {sorted(PARAMETERS)}"
            )
        if not self.values:
            raise ConfigError("ablation value list is empty")
        if not self.seeds:
            raise ConfigError("ablation seed list is empty")
        allowed = PARAMETERS[self.parameter]
        for v in self.values:
            if allowed is None:
                if float(v) < 0:
                    raise ConfigError(f"{self.parameter} values must be >= 0, got {v}")
            elif v not in allowed:
                raise ConfigError(f"{self.parameter} value {v!r} not in {allowed}")


def apply_ablation(cfg: TrainConfig, parameter: str, value) -> TrainConfig:
    """Base config with one knob turned."""
    if parameter == "clusters":
        return cfg.replace(clusters_per_class=int(value))
    if parameter == "bank-size":
        return cfg.replace(images_per_cluster=int(value))
    if parameter == "sim-ratio":
        return cfg.replace(sim_weight=float(value) * cfg.cls_weight)
    if parameter == "bg-ratio":
        return cfg.replace(bg_weight=float(value) * cfg.fg_weight)
    if parameter == "losses":
        return {
            "full": cfg,
            "no_fgs": cfg.replace(fg_weight=0.0),
            "no_bgs": cfg.replace(bg_weight=0.0),
            "cls_only": cfg.replace(sim_weight=0.0),
        }[value]
    if parameter == "module":
        return {
            "full": cfg,
            "no_sim": cfg.replace(mask_head="conv1x1"),
            "no_at": cfg.replace(use_adaptive_threshold=False),
        }[value]
    raise ConfigError(f"unknown ablation parameter {parameter!r}")


def run_pipeline_once(
    data_root: Path | str,
    cfg: TrainConfig,
    out_dir: Path | str,
    eval_split: str = "val",
) -> float:
    """Bank -> train -> export -> mIoU for one configuration."""
    manifest = load_manifest(data_root)
    encoder = ToyEmbedder(cfg.embed_dim)
    bank = build_bank(
        manifest,
        encoder,
        clusters_per_class=cfg.clusters_per_class,
        images_per_cluster=cfg.images_per_cluster,
        white_level=cfg.white_level,
        white_limit=cfg.white_limit,
        seed=cfg.seed,
    )
    models = build_models(bank, cfg, encoder)
    train_stage1(manifest, bank, cfg, out_dir, models=models)
    pairs = []
    for rec in manifest.split(eval_split):
        if not rec.has_mask():
            continue
        pred = export_record_mask(models, rec, gate_by_label=cfg.gate_export_by_label)
        pairs.append((pred, rec.mask()))
    report = evaluate_mask_pairs(
        pairs, manifest.class_names, ignore_value=manifest.ignore_value
    )
    return report.miou


def run_ablation(
    spec: AblationSpec,
    base_cfg: TrainConfig,
    data_root: Path | str,
    out_dir: Path | str,
    parallel: int = 1,
    eval_split: str = "val",
) -> list[dict]:
    """Run the sweep; write per-run rows and a mean/std table under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for value in spec.values:
        for seed in spec.seeds:
            cfg = apply_ablation(base_cfg, spec.parameter, value).replace(seed=int(seed))
            run_dir = out_dir / f"{spec.parameter}_{value}_seed{seed}"
            jobs.append((value, int(seed), cfg, run_dir))

    def run(job):
        value, seed, cfg, run_dir = job
        try:
            miou = run_pipeline_once(data_root, cfg, run_dir, eval_split)
            return {"parameter": spec.parameter, "value": value, "seed": seed,
                    "miou": miou, "status": "ok"}
        except Exception as exc:  # recorded, not fatal
            return {"parameter": spec.parameter, "value": value, "seed": seed,
                    "miou": None, "status": f"failed: {exc}",
                    "trace": traceback.format_exc()}

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(job) for job in jobs]

    summary = []
    for value in spec.values:
        vals = [r["miou"] for r in rows if r["value"] == value and r["miou"] is not None]
        entry = {"value": value, "runs": len(vals)}
        if vals:
            entry.update(summarize_seed_runs(vals))
        summary.append(entry)

    (out_dir / "results.json").write_text(
        json.dumps({"rows": rows, "summary": summary}, indent=2, default=str) + "\n",
        encoding="utf-8",
    )
    lines = ["value\tmean_miou\tstd\truns"]
    for entry in summary:
        if entry["runs"]:
            lines.append(
                f"{entry['value']}\t{entry['mean']:.4f}\t{entry['std']:.4f}\t{entry['runs']}"
            )
        else:
            lines.append(f"{entry['value']}\tnan\tnan\t0")
    (out_dir / "results.tsv").write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")
    return rows
