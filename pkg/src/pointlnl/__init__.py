"""Robust point-cloud processing: adaptive sampling, local-nonlocal
attention cells, small classification/segmentation networks, and the
training and robustness-benchmark harness around them, all on a minimal
float64 autodiff core."""

from . import autodiff, cells, data, geometry, gradcheck, kernels, network, nn, sampling
from .autodiff import Tensor
from .geometry import (GroupedNeighborhood, PointCloud, farthest_point_sample,
                       group_gather, knn_query, pairwise_sq_dist, three_nn_interpolate)
from .gradcheck import GradCheckReport, grad_check
from .network import (Classifier, DivergenceError, LayerConfig, LossConfig, Segmenter,
                      TrainState, build_classifier, build_segmenter, ce_loss_weighted,
                      evaluate, load_checkpoint, repulsion_loss, save_checkpoint,
                      total_loss, train_step)
from .nn import BatchNormState, LinearMap, MLP, ParamStore, batchnorm_apply, dropout_mask, \
    linear_apply, maxpool_set
from .sampling import ASOutput, ASParams, adaptive_sample, adaptive_shift, \
    group_self_attention

__version__ = "0.1.0"

__all__ = [
    "Tensor", "PointCloud", "GroupedNeighborhood",
    "farthest_point_sample", "knn_query", "pairwise_sq_dist", "group_gather",
    "three_nn_interpolate",
    "ParamStore", "LinearMap", "MLP", "BatchNormState",
    "linear_apply", "batchnorm_apply", "maxpool_set", "dropout_mask",
    "grad_check", "GradCheckReport",
    "ASParams", "ASOutput", "group_self_attention", "adaptive_shift", "adaptive_sample",
    "LayerConfig", "LossConfig", "TrainState", "Classifier", "Segmenter",
    "build_classifier", "build_segmenter", "ce_loss_weighted", "repulsion_loss",
    "total_loss", "train_step", "evaluate", "save_checkpoint", "load_checkpoint",
    "DivergenceError",
]
