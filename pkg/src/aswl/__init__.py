"""Sparse neural-network training with attention-driven per-layer pruning.

Layer-wise attention scalars are trained jointly with the weights; each
scalar maps to a pruning ratio that masks the smallest-magnitude weights
of its layer every iteration, so the sparse structure and the weights are
learned simultaneously from random initialization. Export folds the
attentions into the surviving weights for a compact inference artifact.
"""

from .data import Dataset, batches, load_cifar10, load_dataset, load_mnist_idx, split_dataset
from .errors import (DescriptorError, DivergenceError, DomainError, FormatError,
                     ShapeError, StateError)
from .layers import (ARCH_PRESETS, AttentionLayer, Model, attended_forward,
                     attention_vector, build_model, clamp_attentions, parse_architecture)
from .pruning import (global_pruned_ratio, layer_ratios, model_sparsity, prune_layer,
                      prune_model, pruning_ratio, sparsity_regularizer)
from .store import (Checkpoint, SparseModel, export_sparse, import_sparse,
                    load_checkpoint, read_sparse, report_compression,
                    save_checkpoint, write_sparse)
from .tensor import Tape, Tensor, backward, default_dtype, precision, set_default_dtype
from .training import (Adam, SGD, TrainConfig, TrainHistory, adam_step, evaluate,
                       sgd_step, train, train_step)

__version__ = "0.1.0"

__all__ = [
    "ARCH_PRESETS", "Adam", "AttentionLayer", "Checkpoint", "Dataset",
    "DescriptorError", "DivergenceError", "DomainError", "FormatError", "Model",
    "SGD", "ShapeError", "SparseModel", "StateError", "Tape", "Tensor",
    "TrainConfig", "TrainHistory", "adam_step", "attended_forward",
    "attention_vector", "backward", "batches", "build_model", "clamp_attentions",
    "default_dtype", "evaluate", "export_sparse", "global_pruned_ratio",
    "import_sparse", "layer_ratios", "load_checkpoint", "load_cifar10",
    "load_dataset", "load_mnist_idx", "model_sparsity", "parse_architecture",
    "precision", "prune_layer", "prune_model", "pruning_ratio", "read_sparse",
    "report_compression", "save_checkpoint", "set_default_dtype", "sgd_step",
    "sparsity_regularizer", "split_dataset", "train", "train_step", "write_sparse",
]
