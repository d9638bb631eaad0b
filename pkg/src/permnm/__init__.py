"""Learnable channel permutation for N:M semi-structured pruning.

Relaxes channel orderings to doubly stochastic matrices (Sinkhorn),
hardens them to exact permutations (assignment), trains them through a
straight-through tape against the dense layer output, selects N:M masks
from permuted importance scores, and folds the result into exportable
sparse weights.
"""

from .assignment import (
    dense_permutation,
    exhaustive_lsa,
    indices_from_dense,
    solve_lsa,
)
from .graddiff import Stage, Tape, TapeError, finite_diff_check, run_backward, run_forward
from .numerics import (
    AdamWState,
    adamw_init,
    adamw_step,
    gather_columns,
    gather_rows,
    invert_permutation,
    make_rng,
    matmul,
    validate_permutation,
)
from .permlearn import (
    BlockPermutationParams,
    Model,
    ModelLayer,
    PermutationSolution,
    TrainConfig,
    block_boundaries,
    canonicalize_permutation,
    evaluate_permutation,
    fold_and_export,
    folded_forward,
    forward_sparse,
    init_params,
    loss_cosine,
    loss_mse,
    sparse_forward,
    train,
)
from .pipeline import (
    ContainerError,
    TensorContainer,
    generate_fixture,
    load_calibration,
    load_model,
    run_bench,
    run_compare,
    run_prune,
    save_model,
)
from .reference import (
    PartitionOracleResult,
    count_partitions,
    grouping_from_permutation,
    heuristic_cp,
    iter_group_partitions,
    oracle_best_partition,
    permutation_from_grouping,
)
from .sinkhorn import (
    TemperatureSchedule,
    sinkhorn_normalize,
    soft_permutation,
    tau_at,
)
from .sparsity import (
    CompressedNM,
    NMConfig,
    compress_nm,
    decompress_nm,
    magnitude_scores,
    nm_mask,
    retained_score,
    soft_mask,
    validate_nm_mask,
    wanda_scores,
)

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "BlockPermutationParams",
    "CompressedNM",
    "ContainerError",
    "Model",
    "ModelLayer",
    "NMConfig",
    "PartitionOracleResult",
    "PermutationSolution",
    "Stage",
    "Tape",
    "TapeError",
    "TemperatureSchedule",
    "TensorContainer",
    "TrainConfig",
    "adamw_init",
    "adamw_step",
    "block_boundaries",
    "canonicalize_permutation",
    "compress_nm",
    "count_partitions",
    "decompress_nm",
    "dense_permutation",
    "evaluate_permutation",
    "exhaustive_lsa",
    "finite_diff_check",
    "fold_and_export",
    "folded_forward",
    "forward_sparse",
    "gather_columns",
    "gather_rows",
    "generate_fixture",
    "grouping_from_permutation",
    "heuristic_cp",
    "indices_from_dense",
    "init_params",
    "invert_permutation",
    "iter_group_partitions",
    "load_calibration",
    "load_model",
    "loss_cosine",
    "loss_mse",
    "magnitude_scores",
    "make_rng",
    "matmul",
    "nm_mask",
    "oracle_best_partition",
    "permutation_from_grouping",
    "retained_score",
    "run_backward",
    "run_bench",
    "run_compare",
    "run_forward",
    "run_prune",
    "save_model",
    "sinkhorn_normalize",
    "soft_mask",
    "soft_permutation",
    "solve_lsa",
    "sparse_forward",
    "tau_at",
    "train",
    "validate_nm_mask",
    "validate_permutation",
]
