"""Unpaired translation between defect-free and defective EL images.

Two generators are trained against each other: one adds realistic defects
to clean solar-cell images (dataset augmentation), the other removes them
(defect segmentation by subtracting the reconstruction from the input). A
strong identity constraint keeps everything outside the defect untouched.
"""

__version__ = "0.1.0"

from sigan.augmentation import (
    AugmentationManifest,
    ManifestEntry,
    generate_defective,
    load_manifest,
    merge_dataset,
    save_manifest,
)
from sigan.checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from sigan.data import (
    BatchPair,
    DomainCollection,
    ImageSample,
    UnpairedSampler,
    augment_offline,
    denormalize_to_uint8,
    load_dataset,
    preprocess,
)
from sigan.errors import (
    AttentionBudgetError,
    CheckpointError,
    ConfigError,
    DatasetLayoutError,
    ExtractorError,
    ImageDecodeError,
    NonFiniteLossError,
    RoleMismatchError,
    ShapeMismatchError,
    SiganError,
)
from sigan.extractors import available_extractors, get_extractor, register_extractor
from sigan.fid import FeatureStats, FidReport, compute_stats, extract_features, fid, fid_from_stats
from sigan.losses import (
    LossReport,
    LossWeights,
    adversarial_loss_discriminator,
    adversarial_loss_generator,
    cycle_loss,
    strong_identity_loss,
    total_generator_loss,
)
from sigan.networks import (
    ROLE_DA,
    ROLE_DB,
    ROLE_F,
    ROLE_G,
    DiscriminatorArch,
    GeneratorArch,
    NonLocalBlock,
    PatchDiscriminator,
    UNetGenerator,
    init_params,
)
from sigan.segmentation import (
    SegMetrics,
    SegmentationResult,
    ThresholdConfig,
    aggregate_metrics,
    difference_map,
    evaluate_masks,
    find_ground_truth,
    load_mask_png,
    otsu_threshold,
    save_mask_png,
    segment,
    select_threshold,
)
from sigan.trainer import CheckpointSeries, TrainConfig, Trainer, TrainState, lr_schedule, train

__all__ = [
    "__version__",
    "AugmentationManifest",
    "ManifestEntry",
    "generate_defective",
    "load_manifest",
    "merge_dataset",
    "save_manifest",
    "LoadedCheckpoint",
    "load_checkpoint",
    "save_checkpoint",
    "BatchPair",
    "DomainCollection",
    "ImageSample",
    "UnpairedSampler",
    "augment_offline",
    "denormalize_to_uint8",
    "load_dataset",
    "preprocess",
    "AttentionBudgetError",
    "CheckpointError",
    "ConfigError",
    "DatasetLayoutError",
    "ExtractorError",
    "ImageDecodeError",
    "NonFiniteLossError",
    "RoleMismatchError",
    "ShapeMismatchError",
    "SiganError",
    "available_extractors",
    "get_extractor",
    "register_extractor",
    "FeatureStats",
    "FidReport",
    "compute_stats",
    "extract_features",
    "fid",
    "fid_from_stats",
    "LossReport",
    "LossWeights",
    "adversarial_loss_discriminator",
    "adversarial_loss_generator",
    "cycle_loss",
    "strong_identity_loss",
    "total_generator_loss",
    "ROLE_DA",
    "ROLE_DB",
    "ROLE_F",
    "ROLE_G",
    "DiscriminatorArch",
    "GeneratorArch",
    "NonLocalBlock",
    "PatchDiscriminator",
    "UNetGenerator",
    "init_params",
    "SegMetrics",
    "SegmentationResult",
    "ThresholdConfig",
    "aggregate_metrics",
    "difference_map",
    "evaluate_masks",
    "find_ground_truth",
    "load_mask_png",
    "otsu_threshold",
    "save_mask_png",
    "segment",
    "select_threshold",
    "CheckpointSeries",
    "TrainConfig",
    "Trainer",
    "TrainState",
    "lr_schedule",
    "train",
]
