"""Synthetic data, training loops, evaluation and ablation sweeps."""

from .data import (
    Dataset,
    SyntheticDatasetConfig,
    gen_synthetic,
    load_dataset,
    nearest_centroid_accuracy,
    save_dataset,
    split_indices,
)
from .metrics import silhouette
from .train import (
    AlignmentConfig,
    ClassifierConfig,
    TrainHistory,
    TrainState,
    pooled_features,
    pretrain_ircp,
    probe_ce_f1,
    projected_silhouette,
    train_alignment,
    train_classifier,
)
from .sweeps import SweepTable, sweep_epsilon, sweep_iters
