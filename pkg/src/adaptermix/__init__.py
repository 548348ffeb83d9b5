"""Mixtures of residual adapters for parameter-efficient speaker adaptation."""

from .adapters import MixtureOfAdapters, ResidualAdapter, RoutingPlan, adapter_core, compute_k, moa_forward, route
from .data import CorpusConfig, generate_corpus, split_by_budget
from .evaluation import compare, cosine_similarity, mcd, train_embedder
from .experiment import ExperimentConfig, load_config
from .model import (
    AdaptationStrategy,
    BackboneModel,
    ModelConfig,
    build_trainable_mask,
    count_parameters,
    insert_adapters,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Tensor, backward
from .training import TrainConfig, lr_at_step, train

__version__ = "0.1.0"

__all__ = [
    "AdaptationStrategy",
    "BackboneModel",
    "CorpusConfig",
    "ExperimentConfig",
    "MixtureOfAdapters",
    "ModelConfig",
    "ResidualAdapter",
    "RoutingPlan",
    "Tensor",
    "TrainConfig",
    "adapter_core",
    "backward",
    "build_trainable_mask",
    "compare",
    "compute_k",
    "cosine_similarity",
    "count_parameters",
    "generate_corpus",
    "insert_adapters",
    "load_checkpoint",
    "load_config",
    "lr_at_step",
    "mcd",
    "moa_forward",
    "route",
    "save_checkpoint",
    "split_by_budget",
    "train",
    "train_embedder",
]
