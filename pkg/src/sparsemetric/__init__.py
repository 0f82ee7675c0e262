"""Diagonal and block-diagonal bilinear similarity learning."""

from .metric import (MetricConfig, MetricParams, Variant, init_identity, init_random, l2_normalize,
                     materialize_dense, param_count, pre_project, score_matrix, score_pair)
from .losses import LossKind, LossSpec, grad_w_from_dS, triplet_grad_w
from .evaluation import GroundTruth, RetrievalReport, evaluate
from .train import TrainConfig, train

__all__ = [
    "MetricConfig", "MetricParams", "Variant", "init_identity", "init_random", "l2_normalize",
    "materialize_dense", "param_count", "pre_project", "score_matrix", "score_pair",
    "LossKind", "LossSpec", "grad_w_from_dS", "triplet_grad_w",
    "GroundTruth", "RetrievalReport", "evaluate", "TrainConfig", "train",
]
