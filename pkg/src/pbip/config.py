"""Training configuration and the flat key=value config file format.

Config resolution order (lowest to highest precedence): built-in defaults,
config file (``--config``), individual CLI flags. Every run directory gets a
``config.lock`` snapshot of the effective configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed config files or out-of-domain values."""


@dataclass
class TrainConfig:
    # loss weights
    cls_weight: float = 1.0          # weight on the classification loss
    sim_weight: float = 0.5          # weight on the similarity loss
    fg_weight: float = 1.0           # weight on the foreground similarity term
    bg_weight: float = 0.5           # weight on the background similarity term
    temperature: float = 1.0         # contrastive temperature
    threshold_scale: float = 0.15    # adaptive-threshold scale, in [0, 1]
    logit_scale: float = 10.0        # maps pooled cosine scores into logits

    # optimizer / schedule
    lr: float = 1e-5
    weight_decay: float = 0.003
    epochs: int = 10
    batch_size: int = 10
    seed: int = 0

    # bank
    clusters_per_class: int = 3      # subclasses per class (k-means K)
    images_per_cluster: int = 100    # prototypes kept per subclass
    white_level: float = 0.86        # channel floor for a pixel to count as white
    white_limit: float = 0.70        # max white fraction for bank candidacy

    # model
    embed_dim: int = 32              # frozen-encoder feature dimension (toy default)
    channel_dims: tuple[int, int, int] = (8, 16, 32)
    level_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    # behavior switches
    threshold_scope: str = "per_class"       # per_class | global
    cls_loss_mode: str = "bce"               # bce | softmax_ce
    sim_score_mode: str = "as_written"       # as_written (fg sums, bg means) | mean
    fg_weight_norm: str = "clamp"            # clamp | minmax
    mask_head: str = "prototype_sim"         # prototype_sim | conv1x1
    use_adaptive_threshold: bool = True
    gate_export_by_label: bool = True
    augment: bool = True

    def __post_init__(self) -> None:
        self.channel_dims = tuple(self.channel_dims)
        self.level_weights = tuple(self.level_weights)
        self.validate()

    def validate(self) -> None:
        for name in ("cls_weight", "sim_weight", "fg_weight", "bg_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.threshold_scale <= 1.0:
            raise ConfigError("threshold_scale must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be > 0")
        for name in ("clusters_per_class", "images_per_cluster", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("white_level", "white_limit"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.threshold_scope not in ("per_class", "global"):
            raise ConfigError("threshold_scope must be per_class or global")
        if self.cls_loss_mode not in ("bce", "softmax_ce"):
            raise ConfigError("cls_loss_mode must be bce or softmax_ce")
        if self.sim_score_mode not in ("as_written", "mean"):
            raise ConfigError("sim_score_mode must be as_written or mean")
        if self.fg_weight_norm not in ("clamp", "minmax"):
            raise ConfigError("fg_weight_norm must be clamp or minmax")
        if self.mask_head not in ("prototype_sim", "conv1x1"):
            raise ConfigError("mask_head must be prototype_sim or conv1x1")
        if len(self.channel_dims) != 3 or list(self.channel_dims) != sorted(set(self.channel_dims)):
            raise ConfigError("channel_dims must be three strictly increasing ints")
        if len(self.level_weights) != 3:
            raise ConfigError("level_weights must have three entries")
        if any(w < 0 for w in self.level_weights):
            raise ConfigError("level_weights must be >= 0")

    # -- flat key=value serialization ------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_kv_text(text))

    @classmethod
    def load(cls, path: Path | str) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def replace(self, **overrides) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES.get(key)
    if ftype is None:
        raise ConfigError(f"unknown config key: {key!r}")
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype.startswith("tuple[int"):
        return tuple(int(v) for v in raw.split(","))
    if ftype.startswith("tuple[float"):
        return tuple(float(v) for v in raw.split(","))
    return raw


def parse_kv_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        try:
            values[key] = _parse_value(key, raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def write_lockfile(cfg: TrainConfig, out_dir: Path | str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "config.lock"
    cfg.save(lock)
    return lock
