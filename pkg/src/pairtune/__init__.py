"""Exemplar-guided image-to-image translation by per-pair online optimization.

Two stages: correspondence fine-tuning warps the target's appearance into
the source's layout, then multi-code inversion of a frozen generator
refines the warp into a full-resolution image, with the inversion
hyper-parameters self-selected by reference statistics.
"""

from .augmentation import AugmentationSpec, GeometricSpec, PhotometricSpec, augment_geometric, augment_photometric, sample_pair
from .config import RunConfig, serialize_config, validate_config
from .correspondence import CorrelationMatrix, WarpedImage, correlation_matrix, warp
from .encoder import BackboneSpec, FeatureVolume, build_backbone, centralize, extract_features
from .errors import ConfigValidationError, ConfigurationError, IOFailure, NumericError, PairtuneError
from .fid import EmbeddingSpec, GaussianStats, fid_score, frechet_distance, gaussian_stats
from .finetune import CftConfig, CftResult, fine_tune
from .inversion import (
    GeneratorSpec,
    HypothesisConfig,
    InversionHypothesis,
    InversionOptConfig,
    MgiResult,
    generate,
    invert_hypothesis,
    run_mgi,
)
from .losses import LossReport, LossWeights, contextual_loss, contrastive_loss, gram_matrix, info_nce, perceptual_loss, total_loss
from .pipeline import RunReport, build_fid_reference, render_report, run

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "BackboneSpec",
    "CftConfig",
    "CftResult",
    "ConfigValidationError",
    "ConfigurationError",
    "CorrelationMatrix",
    "EmbeddingSpec",
    "FeatureVolume",
    "GaussianStats",
    "GeneratorSpec",
    "GeometricSpec",
    "HypothesisConfig",
    "IOFailure",
    "InversionHypothesis",
    "InversionOptConfig",
    "LossReport",
    "LossWeights",
    "MgiResult",
    "NumericError",
    "PairtuneError",
    "PhotometricSpec",
    "RunConfig",
    "RunReport",
    "WarpedImage",
    "augment_geometric",
    "augment_photometric",
    "build_backbone",
    "build_fid_reference",
    "centralize",
    "contextual_loss",
    "contrastive_loss",
    "correlation_matrix",
    "extract_features",
    "fid_score",
    "fine_tune",
    "frechet_distance",
    "gaussian_stats",
    "generate",
    "gram_matrix",
    "info_nce",
    "invert_hypothesis",
    "perceptual_loss",
    "render_report",
    "run",
    "run_mgi",
    "sample_pair",
    "serialize_config",
    "total_loss",
    "validate_config",
    "warp",
]
