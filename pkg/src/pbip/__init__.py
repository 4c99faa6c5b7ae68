"""Prototype-based image prompting for weakly supervised tissue segmentation.

The pipeline: cluster single-class training patches into an image bank of
subclass prototypes, score backbone feature pyramids against the prototypes
to get per-class pseudo-masks, threshold and separate per-class foreground /
background regions, and train the backbone jointly on an image-label
classification loss and a prototype-contrastive similarity loss. Trained
masks export as argmax pseudo-labels for an external stage-2 segmenter.
"""

__version__ = "0.1.0"

from .bank import CosineKMeans, ImageBank, build_bank, cosine_distance
from .config import TrainConfig
from .data import DatasetManifest, PatchRecord, load_manifest, white_fraction
from .encoders import PrototypeProjector, ToyBackbone, ToyEmbedder
from .matchnet import (
    MatchNet,
    adaptive_threshold,
    aggregate_masks,
    bg_similarity_loss,
    fg_similarity_loss,
    separate,
    similarity_loss,
)
from .metrics import (
    ConfusionAccumulator,
    EvalReport,
    boundary_iou,
    compute_iou_family,
    evaluate_mask_pairs,
    welch_t_test,
)
from .simnet import SimilarityNet, classification_loss, cosine_similarity_masks, pooled_predictions
from .synthetic import SyntheticSpec, generate_synthetic
from .train import (
    PipelineModels,
    TrainState,
    build_models,
    export_pseudo_masks,
    label_gated_argmax,
    stage2_hook,
    total_loss,
    train_stage1,
)
from .zeroshot import zeroshot_classify, zeroshot_eval

__all__ = [
    "CosineKMeans",
    "ImageBank",
    "build_bank",
    "cosine_distance",
    "TrainConfig",
    "DatasetManifest",
    "PatchRecord",
    "load_manifest",
    "white_fraction",
    "PrototypeProjector",
    "ToyBackbone",
    "ToyEmbedder",
    "MatchNet",
    "adaptive_threshold",
    "aggregate_masks",
    "bg_similarity_loss",
    "fg_similarity_loss",
    "separate",
    "similarity_loss",
    "ConfusionAccumulator",
    "EvalReport",
    "boundary_iou",
    "compute_iou_family",
    "evaluate_mask_pairs",
    "welch_t_test",
    "SimilarityNet",
    "classification_loss",
    "cosine_similarity_masks",
    "pooled_predictions",
    "SyntheticSpec",
    "generate_synthetic",
    "PipelineModels",
    "TrainState",
    "build_models",
    "export_pseudo_masks",
    "label_gated_argmax",
    "stage2_hook",
    "total_loss",
    "train_stage1",
    "zeroshot_classify",
    "zeroshot_eval",
    "__version__",
]
