"""Desk-scale validation harness.

A randomly initialised decoder built from the sparse layers (pretraining is
out of reach, so random init stands in for step 0 of training), Monte Carlo
checks of the top-k count concentration bound, Gaussian-fit diagnostics,
kernel timing and FLOPs tables.

Sparsity protocol: every decode step feeds one fresh token embedding drawn
iid N(0, 1) from the model's seeded generator, positions 0, 1, 2, ...
Per-layer FFN nonzero fractions are averaged over all steps. Attended-token
counts are averaged over heads and steps, and the max is taken over both.
"""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from actsparse.layers import (
    AttnContext,
    FfnWeights,
    LayerConfig,
    TINY,
    attention_flops,
    ffn_flops,
    projection_flops,
    rope_apply_split,
    spark_attention,
    spark_ffn,
)
from actsparse.sparse_linalg import masked_matvec, sparse_vecmat
from actsparse.stat_topk import (
    SparseActivation,
    exact_topk,
    sample_moments,
    topk_threshold,
)
from actsparse.tensor_core import ContractError, FlopsReport, as_vector

SCHEMA_VERSION = 1


# --- model ------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Decoder configuration. Even layers attend globally; odd layers attend
    to the last ``layer.window`` tokens."""

    layer: LayerConfig = TINY
    n_layers: int = 4
    seed: int = 0

    def __post_init__(self):
        if int(self.n_layers) != self.n_layers or self.n_layers < 1:
            raise ContractError(f"n_layers must be a positive integer, got {self.n_layers!r}")
        if self.layer.n_heads * self.layer.d_attn != self.layer.d_model:
            raise ContractError("n_heads * d_attn must equal d_model (no output projection)")

    def attn_pattern(self) -> list[Optional[int]]:
        return [None if i % 2 == 0 else self.layer.window for i in range(self.n_layers)]


@dataclass(frozen=True, eq=False)
class LayerWeights:
    wq: np.ndarray  # (n_heads, d_attn, d_model)
    wk: np.ndarray
    wv: np.ndarray
    ffn: FfnWeights


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    layers: tuple[LayerWeights, ...]

    def new_cache(self) -> "DecodeCache":
        cfg = self.config.layer
        return DecodeCache(contexts=[
            [AttnContext(cfg.d_attn, cfg.r_attn, cfg.rope_base) for _ in range(cfg.n_heads)]
            for _ in range(self.config.n_layers)
        ])


@dataclass
class DecodeCache:
    contexts: list[list[AttnContext]]
    position: int = 0


def build_model(cfg: ModelConfig) -> Model:
    """Random model with weights iid N(0, 1/fan_in), deterministic per seed."""
    lc = cfg.layer
    rng = np.random.default_rng(cfg.seed)
    layers = []
    shape = (lc.n_heads, lc.d_attn, lc.d_model)
    scale = 1.0 / math.sqrt(lc.d_model)
    for _ in range(cfg.n_layers):
        wq = rng.standard_normal(shape) * scale
        wk = rng.standard_normal(shape) * scale
        wv = rng.standard_normal(shape) * scale
        ffn = FfnWeights.random(lc.d_model, lc.d_ff, lc.r_ff, rng)
        layers.append(LayerWeights(wq=wq, wk=wk, wv=wv, ffn=ffn))
    return Model(config=cfg, layers=tuple(layers))


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / math.sqrt(float(np.mean(x * x)) + 1e-12)


@dataclass(frozen=True)
class StepObservation:
    position: int
    ffn_nonzero_frac: tuple[float, ...]  # per layer
    attended: tuple[tuple[int, ...], ...]  # per layer, per head
    n_ctx: tuple[int, ...]  # per layer, after windowing


def decode_step(model: Model, token_embedding, cache: DecodeCache, *,
                exact_attention: bool = False) -> tuple[np.ndarray, StepObservation]:
    """Run one token through every layer, appending to the KV cache.

    Each layer is pre-normed attention then pre-normed FFN, both residual.
    """
    cfg = model.config.layer
    x = as_vector(token_embedding)
    if x.size != cfg.d_model:
        raise ContractError(f"token embedding must have length {cfg.d_model}")
    if len(cache.contexts) != model.config.n_layers:
        raise ContractError("cache does not match the model's layer count")
    pos = cache.position
    ffn_fracs, attended, n_ctx = [], [], []
    for layer, ctxs, window in zip(model.layers, cache.contexts, model.config.attn_pattern()):
        if any(c.n_ctx != pos for c in ctxs):
            raise ContractError("cache length disagrees with the decode position")
        h = _rms_norm(x)
        q = layer.wq @ h
        k = layer.wk @ h
        v = layer.wv @ h
        heads, counts = [], []
        for head, ctx in enumerate(ctxs):
            ctx.append(k[head], v[head], pos)
            view = ctx.tail(window)
            qh = rope_apply_split(q[head], cfg.r_attn, pos, cfg.rope_base)
            out, cnt = spark_attention(qh, view, cfg, exact=exact_attention)
            heads.append(out)
            counts.append(cnt)
        n_ctx.append(view.n_ctx)
        x = x + np.concatenate(heads)
        f, _, frac = spark_ffn(_rms_norm(x), layer.ffn, cfg)
        x = x + f
        ffn_fracs.append(frac)
        attended.append(tuple(counts))
    cache.position += 1
    return x, StepObservation(position=pos, ffn_nonzero_frac=tuple(ffn_fracs),
                              attended=tuple(attended), n_ctx=tuple(n_ctx))


@dataclass(frozen=True)
class SparsityReport:
    per_layer_ffn_nonzero_frac: tuple[float, ...]
    per_layer_attended_mean: tuple[float, ...]
    per_layer_attended_max: tuple[int, ...]
    positions: tuple[int, ...]
    observations: tuple[StepObservation, ...] = field(repr=False, default=())

    @classmethod
    def from_observations(cls, obs) -> "SparsityReport":
        obs = tuple(obs)
        if not obs:
            raise ContractError("no observations to summarise")
        n_layers = len(obs[0].ffn_nonzero_frac)
        ffn = tuple(float(np.mean([o.ffn_nonzero_frac[i] for o in obs])) for i in range(n_layers))
        att_mean = tuple(float(np.mean([c for o in obs for c in o.attended[i]]))
                         for i in range(n_layers))
        att_max = tuple(int(max(c for o in obs for c in o.attended[i])) for i in range(n_layers))
        return cls(ffn, att_mean, att_max, tuple(o.position for o in obs), obs)

    def rows(self) -> list[dict]:
        out = []
        for o in self.observations:
            for i, frac in enumerate(o.ffn_nonzero_frac):
                out.append({"position": o.position, "layer": i, "ffn_nonzero_frac": frac,
                            "attended_mean": float(np.mean(o.attended[i])),
                            "attended_max": int(max(o.attended[i])), "n_ctx": o.n_ctx[i]})
        return out

    def summary(self) -> dict:
        return {
            "steps": len(self.positions),
            "per_layer_ffn_nonzero_frac": list(self.per_layer_ffn_nonzero_frac),
            "per_layer_attended_mean": list(self.per_layer_attended_mean),
            "per_layer_attended_max": list(self.per_layer_attended_max),
        }


def run_decode(model: Model, steps: int, *, seed: Optional[int] = None,
               exact_attention: bool = False) -> SparsityReport:
    """Decode ``steps`` random tokens from an empty cache and summarise sparsity."""
    if steps < 1:
        raise ContractError("steps must be positive")
    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    cache = model.new_cache()
    obs = []
    for _ in range(steps):
        emb = rng.standard_normal(model.config.layer.d_model)
        _, o = decode_step(model, emb, cache, exact_attention=exact_attention)
        obs.append(o)
    return SparsityReport.from_observations(obs)


# --- count concentration ------------------------------------------------------

def concentration_bound(d: int, k: int, delta: float) -> float:
    """Bound on ``|count - k|`` (in entries, i.e. already multiplied by d)."""
    if not 0 < delta < 1:
        raise ContractError("delta must lie in (0, 1)")
    frac = min(k / d, 1 - k / d)
    return 4.0 * math.sqrt(d * math.log(6.0 / delta)) * (1.0 + math.sqrt(-2.0 * math.log(frac)))


@dataclass(frozen=True, eq=False)
class ValidationReport:
    d: int
    k: int
    mu: float
    sigma: float
    delta: float
    counts: np.ndarray
    bound: float
    selector: str = "stat"

    @property
    def trials(self) -> int:
        return int(self.counts.size)

    @property
    def abs_dev(self) -> np.ndarray:
        return np.abs(self.counts - self.k)

    @property
    def frac_within(self) -> float:
        return float(np.mean(self.abs_dev <= self.bound))

    @property
    def mean_abs_rel_err(self) -> float:
        return float(np.mean(self.abs_dev)) / self.d

    @property
    def passed(self) -> bool:
        return self.frac_within >= 1.0 - self.delta

    def rows(self) -> list[dict]:
        return [{"trial": i, "count": int(c), "abs_dev": int(abs(c - self.k)),
                 "within_bound": bool(abs(c - self.k) <= self.bound)}
                for i, c in enumerate(self.counts)]

    def summary(self) -> dict:
        return {"d": self.d, "k": self.k, "mu": self.mu, "sigma": self.sigma,
                "delta": self.delta, "trials": self.trials, "selector": self.selector,
                "bound": self.bound, "frac_within": self.frac_within,
                "mean_abs_rel_err": self.mean_abs_rel_err,
                "max_abs_dev": int(self.abs_dev.max()), "passed": self.passed}


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Generator for one trial, keyed on (seed, trial) so results do not
    depend on how trials are split across workers."""
    return np.random.Generator(np.random.Philox(key=[seed, trial]))


def concentration_montecarlo(d: int, k: int, mu: float = 0.0, sigma: float = 1.0,
                        trials: int = 1000, delta: float = 0.01, *, seed: int = 0,
                        selector: str = "stat", inject=None, workers: int = 1
                        ) -> ValidationReport:
    """Count entries above the statistical threshold over iid Gaussian draws.

    ``inject`` replaces the random draws with a fixed vector (every trial).
    ``selector="exact"`` counts with the sort-based top-k instead, which
    must give exactly ``k`` every time.
    """
    if trials < 1:
        raise ContractError("trials must be positive")
    if not 1 <= k <= d - 1:
        raise ContractError(f"k must lie in [1, d-1], got k={k}, d={d}")
    if selector not in ("stat", "exact"):
        raise ContractError(f"unknown selector {selector!r}")
    fixed = None if inject is None else as_vector(inject)
    if fixed is not None and fixed.size != d:
        raise ContractError("injected vector length must equal d")

    def one(trial: int) -> int:
        if fixed is not None:
            x = fixed
        else:
            x = mu + sigma * trial_rng(seed, trial).standard_normal(d)
        if selector == "exact":
            return exact_topk(x, k).popcount
        return int(np.count_nonzero(x > topk_threshold(x, k)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(one, range(trials)))
    else:
        counts = [one(t) for t in range(trials)]
    return ValidationReport(d=d, k=k, mu=mu, sigma=sigma, delta=delta,
                            counts=np.asarray(counts, dtype=np.int64),
                            bound=concentration_bound(d, k, delta), selector=selector)


# --- Gaussian fit diagnostics ----------------------------------------------

@dataclass(frozen=True, eq=False)
class FitReport:
    empirical_cutoff: float
    fitted_cutoff: float
    relative_gap: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    mean: float
    std: float
    degenerate: bool = False

    def summary(self) -> dict:
        return {"empirical_cutoff": self.empirical_cutoff, "fitted_cutoff": self.fitted_cutoff,
                "relative_gap": self.relative_gap, "mean": self.mean, "std": self.std,
                "bins": int(self.hist_counts.size), "degenerate": self.degenerate}

    def rows(self) -> list[dict]:
        return [{"bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)}
                for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts)]


def gaussian_fit_report(x, k: int, eps: float = 1e-12) -> FitReport:
    """Compare the exact k-th largest value with the Gaussian-fitted threshold."""
    x = as_vector(x)
    if x.size < 2:
        raise ContractError("gaussian_fit_report needs at least two entries")
    top = exact_topk(x, k)
    empirical = float(x[top.active].min())
    mom = sample_moments(x)
    fitted = topk_threshold(x, k)
    degenerate = mom.m2 == 0.0
    if degenerate:
        counts, edges = np.histogram(x, bins=1, range=(mom.mean - 0.5, mom.mean + 0.5))
    else:
        counts, edges = np.histogram(x, bins="fd")
    gap = abs(empirical - fitted) / (abs(empirical) + eps)
    return FitReport(empirical, fitted, gap, counts, edges, mom.mean, mom.std, degenerate)


# --- kernel timing -------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    kernel: str
    path: str
    density: float
    median_s: float
    mul_adds: int
    reps: int


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    d_model: int
    d_ff: int
    threads: int

    def speedup(self, kernel: str) -> float:
        t = {r.path: r.median_s for r in self.rows if r.kernel == kernel}
        return t["dense"] / t["sparse"]

    def summary(self) -> dict:
        return {"d_model": self.d_model, "d_ff": self.d_ff, "threads": self.threads,
                "speedup_masked_matvec": self.speedup("masked_matvec"),
                "speedup_sparse_vecmat": self.speedup("sparse_vecmat")}


def _median_time(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_bench(d_model: int, d_ff: int, density: float, reps: int = 20, *,
                 warmup: int = 5, seed: int = 0, tile: int = 64, threads: int = 1
                 ) -> BenchReport:
    """Time dense products against the masked/sparse kernels at ``density``.

    One ``d_ff x d_model`` row-per-neuron matrix serves both kernels. BLAS is
    pinned to ``threads`` threads for the whole measurement.
    """
    if not 0 < density <= 1:
        raise ContractError("density must lie in (0, 1]")
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d_ff, d_model))
    q = rng.standard_normal(d_model)
    n_active = max(1, int(round(density * d_ff)))
    mask = np.zeros(d_ff, dtype=bool)
    mask[rng.choice(d_ff, size=n_active, replace=False)] = True
    u_vals = np.where(mask, rng.standard_normal(d_ff), 0.0)
    u = SparseActivation(values=u_vals, active=mask, nominal_k=n_active)

    rows = []
    with threadpool_limits(limits=threads):
        dense_mm = _median_time(lambda: (w @ q) * mask, reps, warmup)
        sparse_mm = _median_time(lambda: masked_matvec(w, q, mask), reps, warmup)
        dense_vm = _median_time(lambda: u_vals @ w, reps, warmup)
        sparse_vm = _median_time(lambda: sparse_vecmat(w, u, tile=tile), reps, warmup)
    full = 2 * d_ff * d_model
    part = 2 * n_active * d_model
    rows = (
        BenchRow("masked_matvec", "dense", density, dense_mm, full, reps),
        BenchRow("masked_matvec", "sparse", density, sparse_mm, part, reps),
        BenchRow("sparse_vecmat", "dense", density, dense_vm, full, reps),
        BenchRow("sparse_vecmat", "sparse", density, sparse_vm, part, reps),
    )
    return BenchReport(rows=rows, d_model=d_model, d_ff=d_ff, threads=threads)


# --- FLOPs ---------------------------------------------------------------------

def flops_summary(cfg: LayerConfig, n_ctx: int) -> tuple[FlopsReport, FlopsReport, float]:
    """Per-layer, per-token FLOPs of the dense and sparse transformer and their ratio."""
    proj = projection_flops(cfg)
    std = FlopsReport(ffn=ffn_flops(cfg, "standard"),
                      attn_dot=attention_flops(cfg, n_ctx, "standard"), attn_proj=proj)
    spk = FlopsReport(ffn=ffn_flops(cfg, "spark"),
                      attn_dot=attention_flops(cfg, n_ctx, "spark"), attn_proj=proj)
    return std, spk, std.total / spk.total
