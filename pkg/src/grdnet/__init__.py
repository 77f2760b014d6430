"""Visual anomaly detection from defect-free training images.

A residual encoder-decoder-encoder generator learns to reconstruct clean
images from synthetically corrupted ones; a U-Net segmenter compares input
and reconstruction to localize anomalies, supervised only inside a
per-image region of interest.
"""

from .config import ConfigError, RunConfig, TrainConfig, parse_config
from .evaluation import EvalRecord, UndefinedMetricError, auroc, pixel_auroc
from .inference import AnomalyResult, batch_infer, infer, smooth
from .losses import LossReport, LossWeights
from .networks import NetworkBundle, build_bundle, forward_pipeline
from .synth import SynthParams, TrainingTriplet, make_triplet, perlin_field
from .trainer import FitResult, TrainState, fit, train_step, update_lr

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult", "ConfigError", "EvalRecord", "FitResult", "LossReport",
    "LossWeights", "NetworkBundle", "RunConfig", "SynthParams", "TrainConfig",
    "TrainState", "TrainingTriplet", "UndefinedMetricError", "auroc",
    "batch_infer", "build_bundle", "fit", "forward_pipeline", "infer",
    "make_triplet", "parse_config", "perlin_field", "pixel_auroc", "smooth",
    "train_step", "update_lr",
]
