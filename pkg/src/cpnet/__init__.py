"""Correspondence-proposal video learning at toy scale.

The package provides a small float32 tensor engine with reverse-mode
differentiation, semantic k-NN grouping across frames (brute-force and
kd-tree backends), a correspondence embedding module with max pooling,
the moving-square toy dataset, and a CLI harness for training,
evaluation, gradient audits, visualization dumps, and benchmarks.
"""

from .cp import (
    ActivationProvenance,
    CpModuleParams,
    activation_set,
    correspondence_embed,
    feature_change_heatmap,
    init_params,
    residual_insert,
)
from .dataset import ToyDataset, ToySample, generate_toy_dataset, load_cpds, save_cpds
from .knn import (
    FeaturePointCloud,
    SimilarityMatrix,
    TopKIndex,
    arg_top_k,
    grid_coords,
    mask_same_frame,
    pairwise_similarity,
    propose_topk,
)
from .models import ToyModel, build_toy_c2d, build_toy_cpnet, load_model
from .tensor import Tape, Tensor, backward, load_tensors, save_tensors
from .train import Adam, DivergenceError, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ActivationProvenance",
    "Adam",
    "CpModuleParams",
    "DivergenceError",
    "FeaturePointCloud",
    "SimilarityMatrix",
    "Tape",
    "Tensor",
    "TopKIndex",
    "ToyDataset",
    "ToyModel",
    "ToySample",
    "TrainConfig",
    "activation_set",
    "arg_top_k",
    "backward",
    "build_toy_c2d",
    "build_toy_cpnet",
    "correspondence_embed",
    "evaluate",
    "feature_change_heatmap",
    "generate_toy_dataset",
    "grid_coords",
    "init_params",
    "load_cpds",
    "load_model",
    "load_tensors",
    "mask_same_frame",
    "pairwise_similarity",
    "propose_topk",
    "residual_insert",
    "save_cpds",
    "save_tensors",
    "train",
]
