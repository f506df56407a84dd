"""Activation-sparsity toolkit: statistical top-k, low-cost predictor layers,
sparse matvec kernels and FLOPs accounting."""

from actsparse.tensor_core import (
    ContractError,
    FlopsReport,
    as_matrix,
    as_vector,
    dense_mat_transpose_vec,
    dense_matvec,
)
from actsparse.stat_topk import (
    KinkWarning,
    Moments,
    SparseActivation,
    combine_moments,
    exact_topk,
    gaussian_cdf,
    gaussian_quantile,
    huber,
    huber_stat_topk,
    sample_moments,
    sharded_stat_topk_global,
    sharded_stat_topk_local,
    soft_threshold,
    stat_topk,
    stat_topk_neg_inf,
    stat_topk_vjp,
    topk_threshold,
)
from actsparse.sparse_linalg import (
    KernelStats,
    batched_masked_matmul,
    masked_matvec,
    sparse_vecmat,
)

__version__ = "0.1.0"
