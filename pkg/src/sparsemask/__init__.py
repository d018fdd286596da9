"""Sparse-subnetwork training: learned L1 masks, SNIP and lottery-ticket baselines."""

__version__ = "0.1.0"

from .data import BatchPlan, LabeledDataset, batches, load_idx, synthetic_blobs
from .nn import (
    Mode,
    Model,
    apply_threshold,
    build_lenet5_caffe,
    build_lenet300,
    build_mlp,
    build_model,
    sparsity_report,
)
from .optim import LrSchedule, Sgd, SgdConfig
from .pruning import (
    PruneConfig,
    PruneState,
    PruneTimeout,
    count_active,
    espn_finetune,
    espn_mask_learn,
    espn_rewind,
    magnitude_prune_lt,
    saliency_bruteforce,
    snip_prune,
    snip_sensitivity,
    topk_mask,
)
from .tensor import Tape, Tensor
from .train import evaluate, train

__all__ = [
    "BatchPlan",
    "LabeledDataset",
    "LrSchedule",
    "Mode",
    "Model",
    "PruneConfig",
    "PruneState",
    "PruneTimeout",
    "Sgd",
    "SgdConfig",
    "Tape",
    "Tensor",
    "apply_threshold",
    "batches",
    "build_lenet300",
    "build_lenet5_caffe",
    "build_mlp",
    "build_model",
    "count_active",
    "espn_finetune",
    "espn_mask_learn",
    "espn_rewind",
    "evaluate",
    "load_idx",
    "magnitude_prune_lt",
    "saliency_bruteforce",
    "snip_prune",
    "snip_sensitivity",
    "sparsity_report",
    "synthetic_blobs",
    "topk_mask",
    "train",
]
