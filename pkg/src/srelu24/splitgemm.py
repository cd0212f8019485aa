"""Split GEMM: partition features by nonzero count and run A^T B as one 2:4
sparse product over the sparsifiable majority plus one exact dense product
over the remainder. Feature columns that are not sparse enough never lose
values; error stays confined to the sparse partition.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .matcore import gemm_at, gemm_macs
from .sparse24 import apply_mask, sp_gemm_macs, sp_gemm_t, sparsify_feature_wise


@dataclass(frozen=True)
class SplitPlan:
    """Partition of feature indices into a 2:4-sparsifiable set and a dense rest."""

    hidden_dim: int
    ratio: float
    counts: np.ndarray  # per-feature nonzero counts the plan was derived from
    sparse_features: np.ndarray  # ascending feature indices, size ceil(ratio*h)
    dense_features: np.ndarray  # complementary ascending indices


def column_nonzero_counts(a: np.ndarray) -> np.ndarray:
    """counts[j] = number of nonzero entries in column j."""
    return np.count_nonzero(a, axis=0).astype(np.int64)


def _ceil_fraction(ratio: float, h: int) -> int:
    x = ratio * h
    # guard float noise on products that are exactly integral (e.g. 0.29*100)
    if abs(x - round(x)) < 1e-9:
        return int(round(x))
    return math.ceil(x)


def partition_features(counts: np.ndarray, ratio: float) -> SplitPlan:
    """Sort features ascending by (count, index); the first ceil(ratio*h)
    become the sparse set."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"split ratio must be in [0, 1], got {ratio}")
    counts = np.asarray(counts, dtype=np.int64)
    h = len(counts)
    n_sparse = _ceil_fraction(ratio, h)
    order = np.argsort(counts, kind="stable")  # stable = ties by ascending index
    sparse = np.sort(order[:n_sparse])
    dense = np.sort(order[n_sparse:])
    return SplitPlan(h, ratio, counts, sparse, dense)


def split_gemm_t(
    a: np.ndarray, fwd_mask: np.ndarray, b: np.ndarray, plan: SplitPlan
) -> np.ndarray:
    """Masked A^T B via one feature-wise 2:4 GEMM plus one dense GEMM.

    Both partitions see a restricted to fwd_mask; only the sparse partition
    is 2:4-sparsified on top. Partial results scatter into the output by
    feature index, so dense-feature rows are bitwise those of the dense
    reference.
    """
    n, h = a.shape
    if n % 4 != 0:
        raise DimensionError(f"feature-wise groups need rows % 4 == 0, got {n}")
    if plan.hidden_dim != h:
        raise DimensionError(f"plan built for {plan.hidden_dim} features, matrix has {h}")
    if b.shape[0] != n:
        raise DimensionError(f"reduction dimensions differ: {a.shape} x {b.shape}")
    am = apply_mask(a, fwd_mask)
    out = np.zeros((h, b.shape[1]), dtype=a.dtype)
    if plan.sparse_features.size:
        s, _, _ = sparsify_feature_wise(np.ascontiguousarray(am[:, plan.sparse_features]))
        out[plan.sparse_features] = sp_gemm_t(s, b)
    if plan.dense_features.size:
        out[plan.dense_features] = gemm_at(
            np.ascontiguousarray(am[:, plan.dense_features]), b
        )
    return out


def split_gemm_macs(n: int, d: int, plan: SplitPlan) -> int:
    """Exact MAC count: n*d*(|sparse|/2 + |dense|)."""
    return sp_gemm_macs(n, len(plan.sparse_features), d) + gemm_macs(
        len(plan.dense_features), n, d
    )
