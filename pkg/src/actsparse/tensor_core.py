"""Dense containers, reference linear algebra and the FLOPs report type.

Vectors and matrices are plain ``numpy`` arrays. The helpers here validate
and normalise them (float64, C-contiguous / row-major) so every other module
can rely on a single layout. The two dense products are deliberately naive
row-by-row reductions: they are the oracles the sparse kernels are checked
against, so they must not share code with those kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64


class ContractError(ValueError):
    """Raised when operands violate a shape or value precondition."""


def as_vector(x, *, allow_neg_inf: bool = False, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Return ``x`` as a contiguous 1-D array, checking finiteness.

    ``allow_neg_inf`` enables "logit mode", where ``-inf`` entries are legal.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise ContractError(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.size < 1:
        raise ContractError("vector must have at least one entry")
    if allow_neg_inf:
        bad = np.isnan(arr) | (arr == np.inf)
    else:
        bad = ~np.isfinite(arr)
    if bad.any():
        raise ContractError("vector has non-finite entries")
    return arr


def as_matrix(m, *, dtype=DEFAULT_DTYPE, check_finite: bool = True) -> np.ndarray:
    """Return ``m`` as a row-major 2-D array with finite entries.

    Kernels pass ``check_finite=False``: scanning a full weight matrix on
    every call would cost as much as the dense product they replace.
    """
    arr = np.ascontiguousarray(m, dtype=dtype)
    if arr.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"matrix dimensions must be positive, got {arr.shape}")
    if check_finite and not np.isfinite(arr).all():
        raise ContractError("matrix has non-finite entries")
    return arr


def dense_matvec(m, v) -> np.ndarray:
    """Exact dense ``m @ v``, one row dot product at a time."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ContractError(f"matvec: m has {m.shape[1]} cols, v has length {v.shape[0]}")
    out = np.empty(m.shape[0], dtype=DEFAULT_DTYPE)
    for i in range(m.shape[0]):
        out[i] = np.dot(m[i], v)
    return out


def dense_mat_transpose_vec(m, v) -> np.ndarray:
    """Exact dense ``m.T @ v`` computed from the transposed copy of ``m``."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[0] != v.shape[0]:
        raise ContractError(f"matTvec: m has {m.shape[0]} rows, v has length {v.shape[0]}")
    return dense_matvec(np.ascontiguousarray(m.T), v)


@dataclass(frozen=True)
class FlopsReport:
    """Per-token FLOPs of one transformer layer, split by component."""

    ffn: int
    attn_dot: int
    attn_proj: int

    def __post_init__(self):
        for name in ("ffn", "attn_dot", "attn_proj"):
            val = getattr(self, name)
            if val < 0 or int(val) != val:
                raise ContractError(f"FlopsReport.{name} must be a nonnegative integer")

    @property
    def total(self) -> int:
        return self.ffn + self.attn_dot + self.attn_proj

    def as_dict(self) -> dict:
        return {"ffn": self.ffn, "attn_dot": self.attn_dot,
                "attn_proj": self.attn_proj, "total": self.total}


def isclose_vec(a, b, atol: float) -> bool:
    """Entrywise ``|a - b| <= atol``, treating matching infinities as equal."""
    a = np.asarray(a, dtype=DEFAULT_DTYPE)
    b = np.asarray(b, dtype=DEFAULT_DTYPE)
    if a.shape != b.shape:
        return False
    same_inf = np.isinf(a) & (a == b)
    diff = np.where(same_inf, 0.0, np.abs(a - b))
    return bool(np.all(diff <= atol)) and not math.isnan(float(diff.sum()))
