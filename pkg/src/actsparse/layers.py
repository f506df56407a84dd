"""FFN and attention variants, dense and sparse, plus FLOPs-per-token formulas.

Weight orientation follows the math: ``K``-type matrices are
``d_in x d_ff`` (or ``d x n_ctx``) and ``V`` is ``d_out x d_ff``. The sparse
kernels want one contiguous row per neuron/token. :class:`FfnWeights` and
:class:`AttnContext` keep those row-major copies next to the math-oriented
views.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Literal, Optional

import numpy as np
from scipy.special import erf

from actsparse.sparse_linalg import KernelStats, masked_matvec, sparse_vecmat
from actsparse.stat_topk import SparseActivation, exact_topk, stat_topk, stat_topk_neg_inf
from actsparse.tensor_core import ContractError, as_matrix, as_vector


@dataclass(frozen=True)
class LayerConfig:
    d_model: int
    d_ff: int
    k_ff: int
    r_ff: int
    d_attn: int
    k_attn: int
    r_attn: int
    n_heads: int = 1
    window: Optional[int] = None
    rope_base: float = 10000.0
    scale_logits: bool = False

    def __post_init__(self):
        for name in ("d_model", "d_ff", "k_ff", "r_ff", "d_attn", "k_attn", "r_attn", "n_heads"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ContractError(f"{name} must be a positive integer, got {val!r}")
        if not 1 <= self.k_ff <= self.d_ff - 1:
            raise ContractError(f"k_ff must lie in [1, d_ff-1], got {self.k_ff}")
        if not 0 < self.r_ff < self.d_model:
            raise ContractError(f"r_ff must lie in (0, d_model), got {self.r_ff}")
        if not 0 < self.r_attn < self.d_attn:
            raise ContractError(f"r_attn must lie in (0, d_attn), got {self.r_attn}")
        if self.window is not None and self.window < 1:
            raise ContractError("window must be a positive integer")
        if not self.rope_base > 0:
            raise ContractError("rope_base must be positive")

    def with_overrides(self, **kw) -> "LayerConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# FLOPs-accounting dims: the per-token table assumes r = d_model / 2 (so
# r_ff = 1152; r_ff = 1024 is the other reference value) and head dims
# summing to d_model (so 9 heads of 256).
GEMMA2_2B = LayerConfig(d_model=2304, d_ff=13824, k_ff=1106, r_ff=1152,
                        d_attn=256, k_attn=256, r_attn=128, n_heads=9, window=4096)
TINY = LayerConfig(d_model=128, d_ff=768, k_ff=61, r_ff=64,
                   d_attn=64, k_attn=16, r_attn=32, n_heads=2, window=128)


# --- nonlinearities -------------------------------------------------------

def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softplus(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    out = np.empty_like(x)
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu2(x) -> np.ndarray:
    return relu(x) ** 2


def masked_softmax(logits: SparseActivation) -> np.ndarray:
    """Softmax over the active entries of a ``-inf``-filled logit vector.

    Inactive entries get weight exactly 0.
    """
    if logits.mode != "neg_inf":
        raise ContractError("masked_softmax expects neg_inf-filled logits")
    idx = logits.indices
    if idx.size == 0:
        raise ContractError("masked_softmax needs at least one active entry")
    z = logits.values[idx]
    e = np.exp(z - z.max())
    out = np.zeros(len(logits), dtype=np.float64)
    out[idx] = e / e.sum()
    return out


def _all_active(scores: np.ndarray) -> SparseActivation:
    return SparseActivation(values=scores.copy(), active=np.ones(scores.size, dtype=bool),
                            nominal_k=scores.size, mode="neg_inf")


def select_logits(scores, k: int, *, exact: bool = False) -> SparseActivation:
    """Statistical top-k with ``-inf`` fill, bypassed when ``len(scores) <= k``.

    ``exact=True`` swaps in the sort-based selection (oracle runs only).
    """
    scores = as_vector(scores)
    if scores.size <= k:
        return _all_active(scores)
    if exact:
        return exact_topk(scores, k, fill="neg_inf")
    return stat_topk_neg_inf(scores, k)


# --- rotary embedding -----------------------------------------------------

def _rope_segment(x: np.ndarray, position: int, base: float) -> np.ndarray:
    n = x.size
    inv_freq = base ** (-np.arange(0, n, 2, dtype=np.float64) / n)
    ang = position * inv_freq
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[0::2], x[1::2]
    out = np.empty_like(x)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def rope_apply_split(x, split_r: int, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotary embedding applied separately to ``x[:split_r]`` and ``x[split_r:]``.

    Each segment rotates adjacent pairs ``(x[2i], x[2i+1])`` with its own
    frequency ladder ``base ** (-2i / len(segment))``.
    """
    x = as_vector(x)
    if split_r % 2 or (x.size - split_r) % 2 or not 0 <= split_r <= x.size:
        raise ContractError(f"split segments must have even length, got {split_r} / {x.size - split_r}")
    if position < 0:
        raise ContractError("position must be nonnegative")
    out = np.empty_like(x)
    if split_r:
        out[:split_r] = _rope_segment(x[:split_r], position, base)
    if x.size - split_r:
        out[split_r:] = _rope_segment(x[split_r:], position, base)
    return out


# --- FFN ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FfnWeights:
    """Predictor weights ``k1`` (r x d_ff), ``k2`` ((d_model-r) x d_ff), output ``v`` (d_model x d_ff)."""

    k1: np.ndarray
    k2: np.ndarray
    v: np.ndarray
    k2_rows: np.ndarray = field(init=False, repr=False)
    v_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        k1, k2, v = as_matrix(self.k1), as_matrix(self.k2), as_matrix(self.v)
        d_ff = k1.shape[1]
        if k2.shape[1] != d_ff or v.shape[1] != d_ff:
            raise ContractError("k1, k2 and v must share d_ff columns")
        if k1.shape[0] + k2.shape[0] != v.shape[0]:
            raise ContractError("k1 and k2 rows must add up to d_model")
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "k2", k2)
        object.__setattr__(self, "v", v)
        # one contiguous row per FFN neuron for the sparse kernels
        object.__setattr__(self, "k2_rows", np.ascontiguousarray(k2.T))
        object.__setattr__(self, "v_rows", np.ascontiguousarray(v.T))

    @property
    def r(self) -> int:
        return self.k1.shape[0]

    @property
    def d_model(self) -> int:
        return self.v.shape[0]

    @property
    def d_ff(self) -> int:
        return self.v.shape[1]

    @property
    def param_count(self) -> int:
        return self.k1.size + self.k2.size + self.v.size

    @classmethod
    def random(cls, d_model: int, d_ff: int, r: int, rng: np.random.Generator) -> "FfnWeights":
        """Gaussian init with variance 1/fan_in for every matrix."""
        return cls(
            k1=rng.standard_normal((r, d_ff)) / math.sqrt(r),
            k2=rng.standard_normal((d_model - r, d_ff)) / math.sqrt(d_model - r),
            v=rng.standard_normal((d_model, d_ff)) / math.sqrt(d_ff),
        )


def ffn_param_count(d_model: int, d_ff: int) -> int:
    return 2 * d_model * d_ff


def gated_ffn_param_count(d_model: int, d_ff_gated: int) -> int:
    return 3 * d_model * d_ff_gated


def _ffn(q, k, v, act) -> np.ndarray:
    q, k, v = as_vector(q), as_matrix(k), as_matrix(v)
    if k.shape[0] != q.size or v.shape[1] != k.shape[1]:
        raise ContractError("ffn: inconsistent dimensions")
    return v @ act(k.T @ q)


def standard_ffn(q, k, v) -> np.ndarray:
    """``V @ gelu(K.T @ q)``."""
    return _ffn(q, k, v, gelu)


def relu_ffn(q, k, v) -> np.ndarray:
    return _ffn(q, k, v, relu)


def relu2_ffn(q, k, v) -> np.ndarray:
    return _ffn(q, k, v, relu2)


def gated_ffn(q, k1, k2, v) -> np.ndarray:
    """``V @ (gelu(K1.T @ q) * (K2.T @ q))``, all three matrices d_model x d_ff'."""
    q, k1, k2, v = as_vector(q), as_matrix(k1), as_matrix(k2), as_matrix(v)
    if not (k1.shape == k2.shape and k1.shape[0] == q.size and v.shape[1] == k1.shape[1]):
        raise ContractError("gated_ffn: inconsistent dimensions")
    return v @ (gelu(k1.T @ q) * (k2.T @ q))


def topk_gated_ffn(q, k1, k2, v, k: int) -> np.ndarray:
    """Gated FFN with statistical top-k applied to the gate pre-activation."""
    q, k1, k2, v = as_vector(q), as_matrix(k1), as_matrix(k2), as_matrix(v)
    if not (k1.shape == k2.shape and k1.shape[0] == q.size and v.shape[1] == k1.shape[1]):
        raise ContractError("topk_gated_ffn: inconsistent dimensions")
    gate = gelu(stat_topk(k1.T @ q, k).values)
    return v @ (gate * (k2.T @ q))


def spark_ffn(q, w: FfnWeights, cfg: LayerConfig
              ) -> tuple[np.ndarray, KernelStats, float]:
    """Split-input FFN with a low-rank predictor and sparse kernels.

    The first ``r_ff`` input dims feed a dense predictor ``K1.T @ q[:r]``
    whose statistical top-k picks the active neurons. Only those neurons
    are evaluated on ``q[r:]`` and projected through ``V``.

    Returns the output, kernel statistics including the predictor cost, and
    the fraction of active neurons.
    """
    q = as_vector(q)
    r = cfg.r_ff
    if q.size != cfg.d_model or w.d_model != cfg.d_model or w.r != r or w.d_ff != cfg.d_ff:
        raise ContractError("spark_ffn: weights/config/input dimensions disagree")
    pre = w.k1.T @ q[:r]
    sel = stat_topk(pre, cfg.k_ff)
    h = gelu(sel.values)
    g, st_k2 = masked_matvec(w.k2_rows, q[r:], sel.active)
    u = SparseActivation(values=np.where(sel.active, h * g, 0.0), active=sel.active,
                         nominal_k=cfg.k_ff, mode="zero")
    out, st_v = sparse_vecmat(w.v_rows, u)
    predictor = KernelStats(mul_adds=2 * r * cfg.d_ff, bytes_loaded_model=w.k1.nbytes)
    sparsity = sel.popcount / cfg.d_ff
    return out, predictor + st_k2 + st_v, sparsity


# --- attention ------------------------------------------------------------

class AttnContext:
    """Key/value cache for one attention head.

    Stored token-major (one row per cached token), split into the predictor
    part of the keys (first ``r`` dims) and the rest. Keys are rotated with
    :func:`rope_apply_split` on append. The ``keys1``, ``keys2`` and
    ``values`` properties expose the ``dim x n_ctx`` views.
    """

    def __init__(self, d_attn: int, r_attn: int, rope_base: float = 10000.0,
                 capacity: int = 16, apply_rope: bool = True):
        if not 0 < r_attn < d_attn:
            raise ContractError("r_attn must lie in (0, d_attn)")
        self.d_attn = d_attn
        self.r = r_attn
        self.rope_base = rope_base
        self.apply_rope = apply_rope
        self._keys = np.empty((capacity, d_attn))
        self._values = np.empty((capacity, d_attn))
        self._pos = np.empty(capacity, dtype=np.int64)
        self._n = 0

    @classmethod
    def from_arrays(cls, keys1, keys2, values, positions=None) -> "AttnContext":
        """Build a context from ``dim x n_ctx`` matrices whose keys are already rotated."""
        keys1, keys2, values = as_matrix(keys1), as_matrix(keys2), as_matrix(values)
        n = keys1.shape[1]
        if keys2.shape[1] != n or values.shape[1] != n:
            raise ContractError("keys1, keys2 and values must share n_ctx columns")
        if keys1.shape[0] + keys2.shape[0] != values.shape[0]:
            raise ContractError("key splits must add up to d_attn")
        ctx = cls(values.shape[0], keys1.shape[0], capacity=n, apply_rope=False)
        ctx._keys = np.ascontiguousarray(np.vstack([keys1, keys2]).T)
        ctx._values = np.ascontiguousarray(values.T)
        ctx._pos = np.arange(n) if positions is None else np.asarray(positions, dtype=np.int64)
        ctx._n = n
        return ctx

    def __len__(self) -> int:
        return self._n

    @property
    def n_ctx(self) -> int:
        return self._n

    def append(self, key, value, position: int) -> None:
        key, value = as_vector(key), as_vector(value)
        if key.size != self.d_attn or value.size != self.d_attn:
            raise ContractError("key/value length must equal d_attn")
        if self._n and position <= self._pos[self._n - 1]:
            raise ContractError("positions must be strictly increasing")
        if self._n == self._keys.shape[0]:
            cap = max(1, 2 * self._n)
            self._keys = np.resize(self._keys, (cap, self.d_attn))
            self._values = np.resize(self._values, (cap, self.d_attn))
            self._pos = np.resize(self._pos, cap)
        if self.apply_rope:
            key = rope_apply_split(key, self.r, position, self.rope_base)
        self._keys[self._n] = key
        self._values[self._n] = value
        self._pos[self._n] = position
        self._n += 1

    def tail(self, window: Optional[int]) -> "AttnContext":
        """Read-only view of the last ``window`` tokens (all tokens if None)."""
        start = 0 if window is None else max(0, self._n - window)
        view = AttnContext.__new__(AttnContext)
        view.d_attn, view.r, view.rope_base, view.apply_rope = self.d_attn, self.r, self.rope_base, False
        view._keys = self._keys[start:self._n]
        view._values = self._values[start:self._n]
        view._pos = self._pos[start:self._n]
        view._n = self._n - start
        return view

    # token-major buffers used by the kernels
    @property
    def key_rows1(self) -> np.ndarray:
        return self._keys[: self._n, : self.r]

    @property
    def key_rows2(self) -> np.ndarray:
        return np.ascontiguousarray(self._keys[: self._n, self.r:])

    @property
    def value_rows(self) -> np.ndarray:
        return self._values[: self._n]

    @property
    def keys1(self) -> np.ndarray:
        return self.key_rows1.T

    @property
    def keys2(self) -> np.ndarray:
        return self.key_rows2.T

    @property
    def values(self) -> np.ndarray:
        return self.value_rows.T

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self._n]


def standard_attention(q, keys, values) -> np.ndarray:
    """``V @ softmax(K.T @ q)`` with ``K, V`` of shape ``d_attn x n_ctx``."""
    q, keys, values = as_vector(q), as_matrix(keys), as_matrix(values)
    if keys.shape[0] != q.size or keys.shape[1] != values.shape[1]:
        raise ContractError("standard_attention: inconsistent dimensions")
    s = keys.T @ q
    e = np.exp(s - s.max())
    return values @ (e / e.sum())


def topk_attention(q, keys, values, k: int) -> np.ndarray:
    """Standard attention with statistical top-k (``-inf`` fill) on the logits.

    Contexts of at most ``k`` tokens are not masked.
    """
    q, keys, values = as_vector(q), as_matrix(keys), as_matrix(values)
    if keys.shape[0] != q.size or keys.shape[1] != values.shape[1]:
        raise ContractError("topk_attention: inconsistent dimensions")
    weights = masked_softmax(select_logits(keys.T @ q, k))
    return values @ weights


def spark_attention(q, ctx: AttnContext, cfg: LayerConfig, *, exact: bool = False
                    ) -> tuple[np.ndarray, int]:
    """Single-head attention with a low-rank key predictor.

    ``K1.T @ q[:r]`` gives the logits. Statistical top-k with ``-inf`` fill
    selects at most about ``k_attn`` tokens, and contexts of ``k_attn``
    tokens or fewer are attended in full. The softmax weights are gated by
    ``softplus(K2.T @ q[r:])``, computed only on the selected tokens.

    Returns the output and the number of attended tokens.
    """
    out, attended, _ = spark_attention_with_stats(q, ctx, cfg, exact=exact)
    return out, attended


def spark_attention_with_stats(q, ctx: AttnContext, cfg: LayerConfig, *, exact: bool = False
                               ) -> tuple[np.ndarray, int, KernelStats]:
    q = as_vector(q)
    r = cfg.r_attn
    if q.size != cfg.d_attn or ctx.d_attn != cfg.d_attn or ctx.r != r:
        raise ContractError("spark_attention: query/context/config dimensions disagree")
    if ctx.n_ctx < 1:
        raise ContractError("spark_attention needs a nonempty context")
    scores = ctx.key_rows1 @ q[:r]
    if cfg.scale_logits:
        scores = scores / math.sqrt(cfg.d_attn)
    sel = select_logits(scores, cfg.k_attn, exact=exact)
    weights = masked_softmax(sel)
    g, st_k2 = masked_matvec(ctx.key_rows2, q[r:], sel.active)
    gate = np.where(sel.active, softplus(g), 0.0)
    u = SparseActivation(values=weights * gate, active=sel.active,
                         nominal_k=cfg.k_attn, mode="zero")
    out, st_v = sparse_vecmat(ctx.value_rows, u)
    predictor = KernelStats(mul_adds=2 * r * ctx.n_ctx)
    return out, sel.popcount, predictor + st_k2 + st_v


# --- FLOPs per token ------------------------------------------------------

FfnVariant = Literal["standard", "spark", "table"]
AttnVariant = Literal["standard", "spark"]


def ffn_flops(cfg: LayerConfig, variant: FfnVariant = "spark") -> int:
    """FFN FLOPs per token.

    ``standard``: 4 d_model d_ff. ``spark``: 2 (d_ff - k) r + 4 d_model k.
    ``table``: d_model d_ff + 3 d_model k, which equals ``spark`` at
    ``r = d_model / 2`` up to the ``-2 k r`` term.
    """
    d, f, k, r = cfg.d_model, cfg.d_ff, cfg.k_ff, cfg.r_ff
    if variant == "standard":
        return 4 * d * f
    if variant == "spark":
        return 2 * (f - k) * r + 4 * d * k
    if variant == "table":
        return d * f + 3 * d * k
    raise ValueError(f"unknown FFN variant {variant!r}")


def spark_ffn_flops(d_model: int, d_ff: int, k: int, r: int) -> int:
    """Same as ``ffn_flops(..., 'spark')`` without building a config (k may equal d_ff)."""
    return 2 * (d_ff - k) * r + 4 * d_model * k


def attention_flops(cfg: LayerConfig, n_ctx: int, variant: AttnVariant = "spark") -> int:
    """Attention dot-product FLOPs per token, heads summing to d_model."""
    if n_ctx < 1:
        raise ContractError("n_ctx must be at least 1")
    d = cfg.d_model
    if variant == "standard":
        return 4 * d * n_ctx
    if variant == "spark":
        return d * n_ctx + 3 * d * min(cfg.k_attn, n_ctx)
    raise ValueError(f"unknown attention variant {variant!r}")


def projection_flops(cfg: LayerConfig) -> int:
    return 8 * cfg.d_model * cfg.d_model
