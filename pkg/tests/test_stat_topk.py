import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from actsparse.stat_topk import (
    KinkWarning,
    Moments,
    combine_moments,
    exact_topk,
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
from actsparse.tensor_core import ContractError

from conftest import bisect_quantile, normal_cdf

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# --- quantile -------------------------------------------------------------

def test_quantile_median():
    assert gaussian_quantile(0.5) == 0.0


@pytest.mark.parametrize("p", [0.92, 0.975, 0.3, 1e-6, 0.02425, 1e-9, 0.9])
def test_quantile_against_bisection(p):
    assert gaussian_quantile(p) == pytest.approx(bisect_quantile(p), abs=1e-9)


def test_quantile_frozen_values():
    # frozen from the bisection oracle above
    assert gaussian_quantile(0.92) == pytest.approx(1.405072, abs=1e-6)
    assert gaussian_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_domain(p):
    with pytest.raises(ValueError):
        gaussian_quantile(p)


@given(st.floats(1e-12, 1 - 1e-12))
def test_quantile_roundtrip(p):
    assert abs(normal_cdf(gaussian_quantile(p)) - p) <= 1e-9


@given(st.floats(1e-4, 0.5))  # 1 - p rounds for tinier p
def test_quantile_antisymmetric(p):
    assert gaussian_quantile(p) == pytest.approx(-gaussian_quantile(1 - p), abs=1e-8)


# --- moments ----------------------------------------------------------------

def test_sample_moments_examples():
    m = sample_moments([1, 2, 3, 4])
    assert m.mean == 2.5
    assert m.std == pytest.approx(math.sqrt(5 / 3), abs=1e-12)
    m = sample_moments([7.5] * 4)
    assert (m.mean, m.std) == (7.5, 0.0)
    m = sample_moments([-3.0, 3.0])
    assert m.mean == 0.0
    assert m.std == pytest.approx(3 * math.sqrt(2), abs=1e-12)


def test_sample_moments_needs_two():
    with pytest.raises(ContractError):
        sample_moments([1.0])


def test_combine_examples():
    pooled = combine_moments([sample_moments([1, 2]), sample_moments([3, 4])])
    ref = sample_moments([1, 2, 3, 4])
    assert pooled.count == 4
    assert pooled.mean == pytest.approx(ref.mean, abs=1e-12)
    assert pooled.m2 == pytest.approx(ref.m2, abs=1e-12)
    single = sample_moments([1, 5, 9])
    assert combine_moments([single]) == single
    pooled = combine_moments([sample_moments([0, 0]), sample_moments([2, 2])])
    assert (pooled.mean, pooled.m2) == (1.0, 4.0)
    assert pooled.variance == pytest.approx(4 / 3)
    with pytest.raises(ContractError):
        combine_moments([])


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(4, 60), elements=finite), st.data())
def test_combine_matches_concatenation(x, data):
    cuts = sorted(data.draw(st.lists(st.integers(1, x.size - 1), max_size=4, unique=True)))
    blocks = np.split(x, cuts)
    parts = [Moments(b.size, float(b.mean()), float(((b - b.mean()) ** 2).sum())) for b in blocks]
    ref = sample_moments(x)
    got = combine_moments(parts)
    assert got.count == ref.count
    scale = 1.0 + float(np.abs(x).max())
    assert got.mean == pytest.approx(ref.mean, abs=1e-10 * scale)
    assert got.m2 == pytest.approx(ref.m2, rel=1e-9, abs=1e-9 * scale * scale)
    # reversed order gives the same pooled moments up to rounding
    rev = combine_moments(parts[::-1])
    assert rev.mean == pytest.approx(got.mean, abs=1e-10 * scale)


# --- threshold / soft threshold --------------------------------------------

def test_threshold_examples(rng):
    assert topk_threshold([1, 2, 3, 4], 2) == 2.5
    assert topk_threshold([3.0] * 5, 1) == 3.0
    x = rng.standard_normal(13824)
    # Monte Carlo: sampling fluctuation O(d^-1/2) around Q(0.92)
    assert topk_threshold(x, 1106) == pytest.approx(1.4051, abs=5 / math.sqrt(13824))


@pytest.mark.parametrize("k", [0, 4, 5, -1])
def test_threshold_k_range(k):
    with pytest.raises(ContractError):
        topk_threshold([1, 2, 3, 4], k)


def test_soft_threshold_examples():
    assert soft_threshold([3, -1, 0.5], 1).tolist() == [2, 0, 0]
    x = np.array([-2.0, 0.0, 3.5])
    assert soft_threshold(x, 0).tolist() == np.maximum(x, 0).tolist()
    assert soft_threshold([1, 2], 5).tolist() == [0, 0]


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)),
       st.floats(0.01, 3.0))
def test_soft_threshold_variational_form(x, theta):
    # brute-force minimiser of theta*z + (x - z)^2 / 2 over a z >= 0 grid
    grid = np.arange(0.0, 10.0 + 1e-4, 1e-4)
    out = soft_threshold(x, theta)
    for xi, zi in zip(x, out):
        obj = theta * grid + 0.5 * (xi - grid) ** 2
        assert abs(grid[np.argmin(obj)] - zi) <= 1e-4


# --- operators -------------------------------------------------------------

def test_stat_topk_examples(rng):
    out = stat_topk([1, 2, 3, 4], 2)
    assert out.values.tolist() == [0, 0, 0.5, 1.5]
    assert out.active.tolist() == [False, False, True, True]
    assert not stat_topk([2.0] * 6, 3).values.any()
    x = rng.standard_normal(13824)
    theta = topk_threshold(x, 1106)
    assert stat_topk(x, 1106).popcount == int(np.count_nonzero(x > theta))


def test_stat_topk_neg_inf_examples():
    out = stat_topk_neg_inf([1, 2, 3, 4], 2)
    assert out.values.tolist() == [-np.inf, -np.inf, 3, 4]
    assert stat_topk_neg_inf([2.0] * 4, 2).active.all()


def test_neg_inf_keeps_max_when_threshold_exceeds_it():
    # light right tail: theta = mean + std * Q(1 - 1/50) lies above max(x)
    x = np.arange(50.0)
    assert topk_threshold(x, 1) > x.max()
    out = stat_topk_neg_inf(x, 1)
    assert out.indices.tolist() == [49]
    assert out.values[49] == 49.0


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(3, 40), elements=st.floats(-10, 10)),
       st.floats(0.1, 10), st.floats(-50, 50))
def test_selection_is_affine_equivariant(x, a, b):
    k = max(1, x.size // 4)
    base = stat_topk(x, k)
    moved = stat_topk(a * x + b, k)
    theta = topk_threshold(x, k)
    # entries within rounding of the threshold may flip; everything else must agree
    safe = np.abs(x - theta) > 1e-9 * (1 + np.abs(x).max())
    assert np.array_equal(base.active[safe], moved.active[safe])


def test_neg_inf_softmax_is_shift_invariant(rng):
    x = rng.standard_normal(50)
    sel = stat_topk_neg_inf(x, 10)
    kept = x[sel.active]

    def softmax(z):
        e = np.exp(z - z.max())
        return e / e.sum()

    shifted = kept - topk_threshold(x, 10)
    np.testing.assert_allclose(softmax(kept), softmax(shifted), atol=1e-12)


def test_huber_scalar_branches():
    assert huber(0.5, 1.0) == 0.125
    assert huber(2.0, 1.0) == 1.5
    assert huber(-2.0, 1.0) == 1.5


def test_huber_limit(rng):
    x = rng.standard_normal(200)
    np.testing.assert_allclose(huber_stat_topk(x, 20, 1e-8), stat_topk(x, 20).values, atol=1e-7)
    with pytest.raises(ContractError):
        huber_stat_topk(x, 20, 0.0)


def test_exact_topk_examples():
    assert exact_topk([1, 2, 3, 4], 2).indices.tolist() == [2, 3]
    assert exact_topk([1, 2, 3], 3).active.all()
    assert exact_topk([5, 5, 1], 1).indices.tolist() == [0]
    with pytest.raises(ContractError):
        exact_topk([1, 2], 3)


# --- vjp -------------------------------------------------------------------

def _fd_vjp(x, k, c, h=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (c @ stat_topk(x + e, k).values - c @ stat_topk(x - e, k).values) / (2 * h)
    return g


def test_vjp_zero_when_nothing_passes():
    # theta above max is impossible for the statistical threshold; check the
    # derivative is 0 on entries below it and that an empty support gives 0
    x = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0 + 1e-3])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KinkWarning)
        out = stat_topk(x, 5)
        g = stat_topk_vjp(x, 5, np.ones(6))
    if out.popcount == 0:
        assert not g.any()
    c = np.ones(4)
    assert not stat_topk_vjp([1, 2, 3, 4], 2, c, stop_gradient=True)[:2].any()


def test_vjp_linear_in_cotangent(rng):
    x = rng.standard_normal(64)
    u, v = rng.standard_normal(64), rng.standard_normal(64)
    lhs = stat_topk_vjp(x, 8, 2.0 * u - 3.0 * v)
    rhs = 2.0 * stat_topk_vjp(x, 8, u) - 3.0 * stat_topk_vjp(x, 8, v)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_vjp_matches_finite_differences(rng):
    x = rng.standard_normal(64)
    c = rng.standard_normal(64)
    g = stat_topk_vjp(x, 8, c)
    fd = _fd_vjp(x, 8, c)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_stop_gradient_mode(rng):
    x = rng.standard_normal(64)
    c = rng.standard_normal(64)
    g = stat_topk_vjp(x, 8, c, stop_gradient=True)
    np.testing.assert_array_equal(g, np.where(x > topk_threshold(x, 8), c, 0.0))


def test_vjp_kink_warning():
    x = np.array([1.0, 2.0, 2.5, 2.5, 3.0, 4.0])  # k/d = 1/2 puts theta at the mean, 2.5
    with pytest.warns(KinkWarning):
        g = stat_topk_vjp(x, 3, np.ones(6), stop_gradient=True)
    assert g.tolist() == [0, 0, 0, 0, 1, 1]


# --- sharding ----------------------------------------------------------------

def test_sharded_global_examples():
    outs = sharded_stat_topk_global([[1, 2], [3, 4]], 2)
    np.testing.assert_allclose(np.concatenate([o.values for o in outs]), [0, 0, 0.5, 1.5], atol=1e-12)
    x = np.array([0.3, -1.2, 2.2, 0.9, 1.7])
    np.testing.assert_array_equal(sharded_stat_topk_global([x], 2)[0].values, stat_topk(x, 2).values)


def test_sharded_global_permuting_blocks(rng):
    a, b, c = rng.standard_normal(10), rng.standard_normal(7), rng.standard_normal(13)
    one = sharded_stat_topk_global([a, b, c], 5)
    two = sharded_stat_topk_global([c, a, b], 5)
    np.testing.assert_allclose(one[0].values, two[1].values, atol=1e-12)
    np.testing.assert_allclose(one[2].values, two[0].values, atol=1e-12)


def test_sharded_local_examples(rng):
    x = rng.standard_normal(30)
    np.testing.assert_array_equal(sharded_stat_topk_local([x], 4)[0].values, stat_topk(x, 4).values)
    shards = [rng.standard_normal(13824 // 4) for _ in range(4)]
    outs = sharded_stat_topk_local(shards, 1106)
    assert all(o.nominal_k == 277 for o in outs)
    total = sum(o.popcount for o in outs)
    assert abs(total - 4 * 277) < 200


def test_sharded_local_diverges_on_adversarial_split():
    shards = [[10, 11, 12, 13], [0, 0.1, 0.2, 0.3]]
    loc = np.concatenate([o.values for o in sharded_stat_topk_local(shards, 2)])
    glob = np.concatenate([o.values for o in sharded_stat_topk_global(shards, 2)])
    assert not np.allclose(loc, glob)
    # local keeps one entry per shard, including a small one from shard 1
    assert loc[4:].any() and not glob[4:].any()


def test_sharded_local_k_range():
    with pytest.raises(ContractError):
        sharded_stat_topk_local([[1, 2], [3, 4]], 4)
