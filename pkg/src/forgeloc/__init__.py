"""Weakly-supervised temporal forgery localization for audio feature streams."""

from .estimator import ForgeryLocalizer
from .features import (
    DatasetManifest,
    FeatureSequence,
    SynthConfig,
    load_features,
    load_manifest,
    segments_to_frame_labels,
    synth_dataset,
    write_features,
)
from .localize import (
    ForgeryActivation,
    ForgeryProposal,
    activation_from_params,
    fuse_frame_scores,
    generate_proposals,
    proposals_to_pseudo_labels,
)
from .losses import LossConfig, kl_colearning_loss, mil_loss, semantic_contrastive_loss
from .metrics import EvalReport, ap_at_iou, ar_at_an, build_report, eer, mean_ap, roc_auc
from .model import (
    ModelConfig,
    ModelParams,
    init_params,
    load_checkpoint,
    model_backward,
    model_forward,
    pack_params,
    save_checkpoint,
    unpack_params,
)
from .trainer import TrainConfig, TrainResult, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "ForgeryLocalizer",
    "FeatureSequence",
    "DatasetManifest",
    "SynthConfig",
    "synth_dataset",
    "load_features",
    "write_features",
    "load_manifest",
    "segments_to_frame_labels",
    "ForgeryActivation",
    "ForgeryProposal",
    "fuse_frame_scores",
    "generate_proposals",
    "proposals_to_pseudo_labels",
    "activation_from_params",
    "LossConfig",
    "mil_loss",
    "kl_colearning_loss",
    "semantic_contrastive_loss",
    "EvalReport",
    "roc_auc",
    "eer",
    "mean_ap",
    "ap_at_iou",
    "ar_at_an",
    "build_report",
    "ModelConfig",
    "ModelParams",
    "init_params",
    "model_forward",
    "model_backward",
    "pack_params",
    "unpack_params",
    "save_checkpoint",
    "load_checkpoint",
    "TrainConfig",
    "TrainResult",
    "train_stage1",
    "train_stage2",
    "__version__",
]
