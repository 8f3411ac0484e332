"""Perceptual image distances built from divisive normalization cascades."""

from .baselines import LaplacianPyramid, NlapdGdnModel, msssim, mse, nlapd_distance, psnr, ssim
from .data import DatasetManifest, batches, decode_image, load_manifest
from .estimator import ClassicalDistance, NlapdDistance, PerceptNetDistance
from .evaluator import EvalReport, MetricHandle, evaluate_2afc, evaluate_mos, get_metric, spearman
from .model import PerceptNet, PerceptNetConfig, count_parameters, init, load, save
from .tensor import GdnParams, Tensor, backward, conv2d, gdn, l2_feature_distance, maxpool2, pearson
from .trainer import TrainConfig, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "ClassicalDistance", "DatasetManifest", "EvalReport", "GdnParams", "LaplacianPyramid",
    "MetricHandle", "NlapdDistance", "NlapdGdnModel", "PerceptNet", "PerceptNetConfig",
    "PerceptNetDistance", "Tensor", "TrainConfig", "TrainLog", "backward", "batches",
    "conv2d", "count_parameters", "decode_image", "evaluate_2afc", "evaluate_mos", "gdn",
    "get_metric", "init", "l2_feature_distance", "load", "load_manifest", "maxpool2", "mse",
    "msssim", "nlapd_distance", "pearson", "psnr", "save", "spearman", "ssim", "train",
]
