"""Incremental fine-grained retrieval on a small numpy autodiff engine.

A frozen copy of the original-class model teaches an adaptive copy through
distillation of old-class logits and MMD between feature distributions,
while the adaptive copy learns new classes with cross-entropy and
batch-hard triplet loss.
"""
from .diffcore import ContractError, DimensionError, DomainError, Tensor
from .embednet import EmbeddingNet, FrozenSnapshot, extend_classifier, load_params, save_params, snapshot
from .losses import KernelSpec, LossWeights, combined_loss, mmd_loss, triplet_batch_hard
from .datagen import ClassSplitDataset, PKSampler, generate_synthetic, load_feature_csv, split_schedule
from .retrieval import RetrievalIndex, evaluate, export_embeddings
from .trainer import TrainConfig, incremental_step, run_multi_step, run_one_step, train_stage_a

__version__ = "0.1.0"

__all__ = [
    "ClassSplitDataset", "ContractError", "DimensionError", "DomainError", "EmbeddingNet",
    "FrozenSnapshot", "KernelSpec", "LossWeights", "PKSampler", "RetrievalIndex", "Tensor",
    "TrainConfig", "combined_loss", "evaluate", "export_embeddings", "extend_classifier",
    "generate_synthetic", "incremental_step", "load_feature_csv", "load_params", "mmd_loss",
    "run_multi_step", "run_one_step", "save_params", "snapshot", "split_schedule",
    "train_stage_a", "triplet_batch_hard",
]
