"""Sparse matrix-vector kernels driven by activation masks.

Two kernels, both over weight matrices stored with one contiguous row per
neuron (the skippable unit):

* :func:`masked_matvec` computes only the rows selected by a mask and leaves
  the others at exactly zero.
* :func:`sparse_vecmat` forms the weighted sum of the rows picked out by a
  sparse activation, tile by tile.

Each kernel returns :class:`KernelStats` alongside its result. Multiply and
add count as two FLOPs. Bytes are counted at row granularity.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from actsparse.stat_topk import SparseActivation
from actsparse.tensor_core import ContractError, as_matrix, as_vector

DEFAULT_TILE = 64


@dataclass(frozen=True)
class KernelStats:
    mul_adds: int = 0
    rows_skipped: int = 0
    cols_skipped: int = 0
    bytes_loaded_model: int = 0

    def __add__(self, other: "KernelStats") -> "KernelStats":
        return KernelStats(
            mul_adds=self.mul_adds + other.mul_adds,
            rows_skipped=self.rows_skipped + other.rows_skipped,
            cols_skipped=self.cols_skipped + other.cols_skipped,
            bytes_loaded_model=self.bytes_loaded_model + other.bytes_loaded_model,
        )


def _as_mask(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ContractError("mask must be boolean")
    if mask.shape != (n,):
        raise ContractError(f"mask length {mask.shape} does not match {n} rows")
    return mask


def masked_matvec(w, q, mask) -> tuple[np.ndarray, KernelStats]:
    """``(w @ q) * mask`` without touching masked-out rows of ``w``.

    ``w`` is ``d_out x d_in`` with one row per output neuron.
    """
    w = as_matrix(w, check_finite=False)
    q = as_vector(q)
    if w.shape[1] != q.shape[0]:
        raise ContractError(f"masked_matvec: w has {w.shape[1]} cols, q has length {q.shape[0]}")
    mask = _as_mask(mask, w.shape[0])
    idx = np.flatnonzero(mask)
    if idx.size == w.shape[0]:
        out = w @ q
    else:
        out = np.zeros(w.shape[0], dtype=w.dtype)
        if idx.size:
            out[idx] = w[idx] @ q
    d_in = w.shape[1]
    stats = KernelStats(
        mul_adds=2 * idx.size * d_in,
        rows_skipped=w.shape[0] - idx.size,
        bytes_loaded_model=idx.size * d_in * w.itemsize,
    )
    return out, stats


def _tile_bounds(idx: np.ndarray, n_rows: int, tile: int) -> list[tuple[int, int]]:
    # slices into idx, one per tile holding at least one active row
    edges = np.arange(0, n_rows + tile, tile)
    cuts = np.searchsorted(idx, edges)
    return [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def sparse_vecmat(v, u: SparseActivation, *, tile: int = DEFAULT_TILE,
                  workers: int = 1) -> tuple[np.ndarray, KernelStats]:
    """Sum of ``u.values[i] * v[i]`` over the active rows of ``u``.

    Rows are processed in tiles of ``tile`` consecutive rows; each tile
    produces a partial sum and partials are added in ascending tile order.
    ``workers > 1`` computes partials on a thread pool. The reduction order
    does not change, so the result is identical to ``workers=1``.
    """
    v = as_matrix(v, check_finite=False)
    if not isinstance(u, SparseActivation) or u.mode != "zero":
        raise ContractError("sparse_vecmat needs a zero-fill SparseActivation")
    if len(u) != v.shape[0]:
        raise ContractError(f"sparse_vecmat: u has length {len(u)}, v has {v.shape[0]} rows")
    if tile < 1:
        raise ContractError("tile size must be positive")
    idx = u.indices
    vals = u.values

    def partial(bounds):
        a, b = bounds
        lo, hi = int(idx[a]), int(idx[b - 1]) + 1
        if hi - lo == b - a:
            # fully active run: a view, no gather copy
            return vals[lo:hi] @ v[lo:hi]
        sub = idx[a:b]
        return vals[sub] @ v[sub]

    bounds = _tile_bounds(idx, v.shape[0], tile)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(partial, bounds))
    else:
        partials = [partial(b) for b in bounds]
    out = np.zeros(v.shape[1], dtype=v.dtype)
    for p in partials:
        out += p
    d_out = v.shape[1]
    stats = KernelStats(
        mul_adds=2 * idx.size * d_out,
        rows_skipped=v.shape[0] - idx.size,
        bytes_loaded_model=idx.size * d_out * v.itemsize,
    )
    return out, stats


def batched_masked_matmul(w, q_batch: Sequence, masks: Sequence
                          ) -> tuple[list[np.ndarray], KernelStats]:
    """Masked matvec for a batch of tokens sharing one weight matrix.

    Compute follows each token's own mask. Memory traffic follows the OR of
    all masks: a row is loaded once if any token in the batch needs it.
    """
    w = as_matrix(w, check_finite=False)
    if len(q_batch) != len(masks):
        raise ContractError("batch and mask lists differ in length")
    if not q_batch:
        raise ContractError("empty batch")
    union = np.zeros(w.shape[0], dtype=bool)
    outs = []
    mul_adds = 0
    for q, mask in zip(q_batch, masks):
        mask = _as_mask(mask, w.shape[0])
        out, st = masked_matvec(w, q, mask)
        outs.append(out)
        mul_adds += st.mul_adds
        union |= mask
    n_loaded = int(np.count_nonzero(union))
    stats = KernelStats(
        mul_adds=mul_adds,
        rows_skipped=w.shape[0] - n_loaded,
        bytes_loaded_model=n_loaded * w.shape[1] * w.itemsize,
    )
    return outs, stats
