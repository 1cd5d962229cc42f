"""Occlusion-aware image classification.

The pipeline: score an image's patches against a per-class reference
memory bank to get a pixel anomaly map, threshold it (Otsu) into an
occlusion mask, gray out the masked pixels, estimate occlusion severity
as the map mean, and classify with the pool member trained at the
nearest occlusion level. Synthetic Perlin-blob occlusions provide
training data, calibration targets, and ground truth for evaluation.
"""
from .bank import (MemoryBank, build_bank, calibrate,
                   calibration_from_distances, raw_score, read_bank,
                   score_image, upsample_patch_grid, write_bank)
from .errors import DegenerateCalibrationError, FormatError, OasicError
from .experiment import (CONFIG_NAMES, ExperimentConfig, Report,
                         load_labeled_dir, parse_config_file, run_experiment,
                         write_report)
from .features import (FeatureDescriptor, HandcraftedExtractor,
                       OembDirectoryExtractor, PatchEmbeddingGrid,
                       make_extractor, pooled_feature, read_oemb, write_oemb)
from .imaging import (as_anomaly_map, as_image, as_mask, read_amap, read_image,
                      read_mask, write_amap, write_image, write_mask)
from .masking import estimate_severity, gray_mask
from .metrics import EvalCurve, accuracy, auc_occ, auroc, average_precision
from .pool import (DEFAULT_LEVELS, Classifier, ModelPool, PredictionResult,
                   cross_entropy_and_grad, fit_logistic, image_feature,
                   load_pool, oasic_predict, save_pool, select_model, softmax,
                   train_classifier, train_pool)
from .seeding import derive_seed, rng_for
from .synth import (GrayFill, OccludedDataset, PerlinParams, TextureFill,
                    apply_occlusion, mask_from_field, occlude_image,
                    perlin_field, synth_dataset)
from .thresholding import (anomaly_histogram, otsu_threshold, otsu_variances,
                           parse_threshold_spec, threshold_fixed)
from .toydata import TEXTURE_NAMES, ToyDataset, bundled_texture, gen_toy_dataset

__version__ = "0.1.0"

__all__ = [
    "MemoryBank", "build_bank", "calibrate", "calibration_from_distances",
    "raw_score", "read_bank", "score_image", "upsample_patch_grid",
    "write_bank",
    "DegenerateCalibrationError", "FormatError", "OasicError",
    "CONFIG_NAMES", "ExperimentConfig", "Report", "load_labeled_dir",
    "parse_config_file", "run_experiment", "write_report",
    "FeatureDescriptor", "HandcraftedExtractor", "OembDirectoryExtractor",
    "PatchEmbeddingGrid", "make_extractor", "pooled_feature", "read_oemb",
    "write_oemb",
    "as_anomaly_map", "as_image", "as_mask", "read_amap", "read_image",
    "read_mask", "write_amap", "write_image", "write_mask",
    "estimate_severity", "gray_mask",
    "EvalCurve", "accuracy", "auc_occ", "auroc", "average_precision",
    "DEFAULT_LEVELS", "Classifier", "ModelPool", "PredictionResult",
    "cross_entropy_and_grad", "fit_logistic", "image_feature", "load_pool",
    "oasic_predict", "save_pool", "select_model", "softmax",
    "train_classifier", "train_pool",
    "derive_seed", "rng_for",
    "GrayFill", "OccludedDataset", "PerlinParams", "TextureFill",
    "apply_occlusion", "mask_from_field", "occlude_image", "perlin_field",
    "synth_dataset",
    "anomaly_histogram", "otsu_threshold", "otsu_variances",
    "parse_threshold_spec", "threshold_fixed",
    "TEXTURE_NAMES", "ToyDataset", "bundled_texture", "gen_toy_dataset",
    "__version__",
]
