"""Statistical top-k.

A linear-time approximate top-k: fit a Gaussian to the entries of ``x`` via
its sample mean and standard deviation, place the threshold at the
``1 - k/d`` quantile of that Gaussian, then soft-threshold. Nothing is sorted.

Also here: the Gaussian quantile function used by the threshold, pooled
moments for sharded inputs, the Huber-smoothed variant, the vector-Jacobian
product, and a sort-based exact top-k kept as an oracle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from actsparse.tensor_core import ContractError, as_vector

Fill = Literal["zero", "neg_inf"]

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)

# Rational approximation of the normal quantile (Acklam); ~1.2e-9 relative
# error before refinement.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


class KinkWarning(RuntimeWarning):
    """An input entry sits exactly on the threshold, where the map has a kink."""


def gaussian_cdf(z: float) -> float:
    """Standard normal CDF via ``erfc`` (accurate in the lower tail)."""
    return 0.5 * math.erfc(-z / _SQRT2)


def _lower_quantile(p: float) -> float:
    # p in (0, 0.5]
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    else:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    # one Halley step against the erfc-based CDF
    e = gaussian_cdf(x) - p
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def gaussian_quantile(p: float) -> float:
    """Inverse CDF of the standard normal distribution.

    Constant time: a piecewise rational approximation followed by a single
    Halley refinement. Absolute error in ``Phi(Q(p)) - p`` is below 1e-9
    on ``[1e-12, 1 - 1e-12]``.

    Raises
    ------
    ValueError
        If ``p`` is not strictly inside ``(0, 1)``.
    """
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ValueError(f"quantile argument must lie in (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return _lower_quantile(p)
    # 1 - p is exact for p >= 0.5
    return -_lower_quantile(1.0 - p)


@dataclass(frozen=True)
class Moments:
    """Count, mean and sum of squared deviations of a block of reals."""

    count: int
    mean: float
    m2: float

    @property
    def variance(self) -> float:
        if self.count < 2:
            raise ContractError("sample variance needs at least two entries")
        return self.m2 / (self.count - 1)

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def sample_moments(x) -> Moments:
    """Moments of ``x`` with the ``d - 1`` divisor convention for the variance."""
    x = as_vector(x)
    if x.size < 2:
        raise ContractError("sample moments need at least two entries")
    mean = float(x.sum()) / x.size
    dev = x - mean
    return Moments(count=int(x.size), mean=mean, m2=float(np.dot(dev, dev)))


def combine_moments(parts: Sequence[Moments]) -> Moments:
    """Pool per-block moments into the moments of the concatenation.

    Reduction runs left to right in the given order, so the result is
    deterministic for a fixed partition.
    """
    if not parts:
        raise ContractError("combine_moments needs at least one part")
    it = iter(parts)
    acc = next(it)
    for part in it:
        if part.count == 0:
            continue
        if acc.count == 0:
            acc = part
            continue
        n = acc.count + part.count
        delta = part.mean - acc.mean
        mean = acc.mean + delta * part.count / n
        m2 = acc.m2 + part.m2 + delta * delta * acc.count * part.count / n
        acc = Moments(count=n, mean=mean, m2=m2)
    if acc.count < 2:
        raise ContractError("pooled count must be at least 2")
    return acc


def _check_k(k: int, d: int) -> int:
    if int(k) != k:
        raise ContractError(f"k must be an integer, got {k!r}")
    k = int(k)
    if d < 2:
        raise ContractError(f"statistical top-k needs d >= 2, got d={d}")
    if not 1 <= k <= d - 1:
        raise ContractError(f"k must satisfy 1 <= k <= d-1 = {d - 1}, got k={k}")
    return k


def threshold_from_moments(mom: Moments, k: int) -> float:
    """Threshold ``mean + std * Q(1 - k/d)`` with ``d = mom.count``."""
    k = _check_k(k, mom.count)
    return mom.mean + mom.std * gaussian_quantile(1.0 - k / mom.count)


def topk_threshold(x, k: int) -> float:
    x = as_vector(x)
    _check_k(k, x.size)
    return threshold_from_moments(sample_moments(x), k)


def soft_threshold(x, theta: float) -> np.ndarray:
    """Elementwise ``max(x - theta, 0)``."""
    x = as_vector(x)
    return np.maximum(x - float(theta), 0.0)


@dataclass(frozen=True, eq=False)
class SparseActivation:
    """Dense value buffer plus an active-entry mask.

    ``mode="zero"``: inactive entries are exactly 0. ``mode="neg_inf"``:
    inactive entries are exactly ``-inf`` (attention logits).
    """

    values: np.ndarray
    active: np.ndarray
    nominal_k: int
    mode: Fill = "zero"

    def __post_init__(self):
        if self.values.shape != self.active.shape or self.values.ndim != 1:
            raise ContractError("values and active mask must be 1-D and the same length")
        if self.active.dtype != np.bool_:
            raise ContractError("active mask must be boolean")
        fill = 0.0 if self.mode == "zero" else -np.inf
        if self.mode not in ("zero", "neg_inf"):
            raise ContractError(f"unknown fill mode {self.mode!r}")
        if not np.all(self.values[~self.active] == fill):
            raise ContractError(f"inactive entries must equal {fill} in {self.mode} mode")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.active))

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.active)


def stat_topk(x, k: int) -> SparseActivation:
    """Soft-threshold ``x`` at its statistical top-k threshold (zero fill).

    >>> stat_topk([1.0, 2.0, 3.0, 4.0], 2).values
    array([0. , 0. , 0.5, 1.5])
    """
    x = as_vector(x)
    theta = topk_threshold(x, k)
    values = np.maximum(x - theta, 0.0)
    # entries equal to theta soft-threshold to 0 and are reported inactive
    return SparseActivation(values=values, active=values > 0.0, nominal_k=int(k), mode="zero")


def stat_topk_neg_inf(x, k: int) -> SparseActivation:
    """Keep entries ``>= theta`` unshifted and set the rest to ``-inf``.

    The ``>=`` rule keeps every entry of a constant input. Kept logits are not
    shifted by ``theta``; softmax is shift invariant, so attention weights
    are unaffected.
    """
    x = as_vector(x)
    theta = topk_threshold(x, k)
    active = x >= theta
    if not active.any():
        active[int(np.argmax(x))] = True
    values = np.where(active, x, -np.inf)
    return SparseActivation(values=values, active=active, nominal_k=int(k), mode="neg_inf")


def huber(x, delta: float) -> np.ndarray:
    """Elementwise Huber function: quadratic inside ``|x| < delta``, linear outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def huber_stat_topk(x, k: int, delta: float) -> np.ndarray:
    """``huber(stat_topk(x), delta) / delta``; continuously differentiable in ``x``.

    Tends to ``stat_topk(x)`` as ``delta -> 0``. Use :func:`stat_topk` for the
    unsmoothed operator.
    """
    if not delta > 0:
        raise ContractError(f"Huber delta must be positive, got {delta!r}")
    return huber(stat_topk(x, k).values, delta) / delta


def stat_topk_vjp(x, k: int, cotangent, *, stop_gradient: bool = False) -> np.ndarray:
    """Vector-Jacobian product of :func:`stat_topk` at ``x``.

    By default the gradient flows through the threshold's dependence on
    ``x`` (via the sample mean and standard deviation). With
    ``stop_gradient=True`` the threshold is treated as a constant.

    Entries sitting exactly on the threshold emit a :class:`KinkWarning` and
    take derivative 0 there.
    """
    x = as_vector(x)
    c = as_vector(cotangent)
    if c.shape != x.shape:
        raise ContractError("cotangent must match x in length")
    d = x.size
    k = _check_k(k, d)
    mom = sample_moments(x)
    z = gaussian_quantile(1.0 - k / d)
    std = mom.std
    theta = mom.mean + std * z
    if np.any(x == theta):
        warnings.warn("input entry equals the threshold; using derivative 0 at the kink",
                      KinkWarning, stacklevel=2)
    passed = np.where(x > theta, c, 0.0)
    if stop_gradient:
        return passed
    if std == 0.0:
        # constant input: every entry is on the kink and the output is 0
        return passed
    # d theta / d x_j = 1/d + z * (x_j - mean) / ((d - 1) * std)
    dtheta = 1.0 / d + z * (x - mom.mean) / ((d - 1) * std)
    return passed - passed.sum() * dtheta


def exact_topk(x, k: int, fill: Fill = "zero") -> SparseActivation:
    """Sort-based top-k: exactly ``k`` active entries, ties to the lowest index."""
    x = as_vector(x)
    if int(k) != k or not 1 <= k <= x.size:
        raise ContractError(f"k must satisfy 1 <= k <= {x.size}, got {k!r}")
    order = np.argsort(-x, kind="stable")
    active = np.zeros(x.size, dtype=bool)
    active[order[: int(k)]] = True
    values = np.where(active, x, 0.0 if fill == "zero" else -np.inf)
    return SparseActivation(values=values, active=active, nominal_k=int(k), mode=fill)


def sharded_stat_topk_global(shards: Sequence, k: int) -> list[SparseActivation]:
    """Statistical top-k over a vector split into shards, using pooled moments.

    Each shard contributes its own (count, mean, m2); the pooled moments give
    one global threshold, so the concatenated output matches the unsharded
    operator up to rounding.
    """
    arrays = [as_vector(s) for s in shards]
    if not arrays:
        raise ContractError("need at least one shard")
    parts = []
    for a in arrays:
        mean = float(a.sum()) / a.size
        dev = a - mean
        parts.append(Moments(count=int(a.size), mean=mean, m2=float(np.dot(dev, dev))))
    theta = threshold_from_moments(combine_moments(parts), k)
    out = []
    for a in arrays:
        values = np.maximum(a - theta, 0.0)
        out.append(SparseActivation(values=values, active=values > 0.0,
                                    nominal_k=int(k), mode="zero"))
    return out


def sharded_stat_topk_local(shards: Sequence, k: int) -> list[SparseActivation]:
    """Independent statistical top-k' on each shard, ``k' = ceil(k / m)``.

    No cross-shard communication. The per-shard ``k'`` is recorded as the
    ``nominal_k`` of each output.
    """
    arrays = [as_vector(s) for s in shards]
    if not arrays:
        raise ContractError("need at least one shard")
    k_local = -(-int(k) // len(arrays))
    for a in arrays:
        if a.size < 2 or not 1 <= k_local <= a.size - 1:
            raise ContractError(
                f"per-shard k'={k_local} out of range for shard of length {a.size}")
    return [stat_topk(a, k_local) for a in arrays]
