"""OLED: one-class novelty detection with an adversarially masked encoder-decoder."""

from .datasets import (
    build_cifar_protocol,
    build_mnist_protocol,
    build_ucsd_protocol,
    extract_patches,
    load_cifar,
    load_mnist,
    parse_idx,
    parse_pgm,
    reassemble_patches,
)
from .errors import OledError
from .masking import MaskModule, ThresholdConfig, apply_mask, threshold
from .reconstructor import ReconstructorConfig, build_reconstructor
from .scoring import SCORE_TYPES, aggregate_scores, auc, eer, score_samples, segmentation_eval
from .training import TrainConfig, evaluate, load_models, train, train_cae_baseline

__version__ = "0.1.0"

__all__ = [
    "build_cifar_protocol", "build_mnist_protocol", "build_ucsd_protocol", "extract_patches",
    "load_cifar", "load_mnist", "parse_idx", "parse_pgm", "reassemble_patches", "OledError",
    "MaskModule", "ThresholdConfig", "apply_mask", "threshold", "ReconstructorConfig",
    "build_reconstructor", "SCORE_TYPES", "aggregate_scores", "auc", "eer", "score_samples",
    "segmentation_eval", "TrainConfig", "evaluate", "load_models", "train", "train_cae_baseline",
]
