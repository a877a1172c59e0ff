"""Learned patch orderings for order-sensitive sequence classifiers."""

from .grids import (
    SCAN_ORDERS,
    GridSpec,
    apply_to_sequence,
    compose,
    identity_permutation,
    invert,
    linearize,
    load_permutation,
    random_permutation,
    save_permutation,
    trajectory_points,
)
from .policy import (
    OrderPolicy,
    ml_permutation,
    plackett_luce_grad,
    plackett_luce_log_prob,
    sample_permutation,
)
from .compression import CompressionReport, PatchQuantizer, rank_orderings
from .data import CHANNELS, FAMILIES, GridDataset, SynthSpec, generate, load_dataset, save_dataset
from .backbones import (
    KINDS,
    ToyBackbone,
    attention_coverage,
    attention_matrix_op,
    positional_shift,
)
from .training import (
    CurriculumSchedule,
    EmaBaseline,
    TrainConfig,
    TrainingError,
    evaluate,
    run_rank_bandit,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "SCAN_ORDERS",
    "GridSpec",
    "apply_to_sequence",
    "compose",
    "identity_permutation",
    "invert",
    "linearize",
    "load_permutation",
    "random_permutation",
    "save_permutation",
    "trajectory_points",
    "OrderPolicy",
    "ml_permutation",
    "plackett_luce_grad",
    "plackett_luce_log_prob",
    "sample_permutation",
    "CompressionReport",
    "PatchQuantizer",
    "rank_orderings",
    "CHANNELS",
    "FAMILIES",
    "GridDataset",
    "SynthSpec",
    "generate",
    "load_dataset",
    "save_dataset",
    "KINDS",
    "ToyBackbone",
    "attention_coverage",
    "attention_matrix_op",
    "positional_shift",
    "CurriculumSchedule",
    "EmaBaseline",
    "TrainConfig",
    "TrainingError",
    "evaluate",
    "run_rank_bandit",
    "train_model",
]
