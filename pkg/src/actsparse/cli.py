"""Command-line entry point.

Structured results (JSON or CSV) go to stdout. A short human-readable summary
goes to stderr. Exit status: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from actsparse import harness, plotting
from actsparse.harness import SCHEMA_VERSION, ModelConfig
from actsparse.layers import GEMMA2_2B, TINY, LayerConfig
from actsparse.tensor_core import ContractError

PRESETS = {
    "gemma2-2b": ModelConfig(layer=GEMMA2_2B, n_layers=26),
    "tiny": ModelConfig(layer=TINY, n_layers=4),
}
THREADS_ENV = "ACTSPARSE_THREADS"


class UsageError(Exception):
    pass


def _parse_value(raw: str, current):
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    if isinstance(current, float):
        return float(raw)
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"expected an integer, got {raw!r}") from None


def read_config_file(path) -> list[tuple[str, str]]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, val = line.split("=", 1)
        pairs.append((key.strip(), val.strip()))
    return pairs


def apply_overrides(cfg: ModelConfig, pairs: Sequence[tuple[str, str]]) -> ModelConfig:
    layer_fields = {f.name for f in fields(LayerConfig)}
    layer_kw, model_kw = {}, {}
    for key, raw in pairs:
        if key in layer_fields:
            layer_kw[key] = _parse_value(raw, getattr(cfg.layer, key))
        elif key in ("n_layers", "seed"):
            model_kw[key] = _parse_value(raw, getattr(cfg, key))
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        layer = replace(cfg.layer, **layer_kw)
        return replace(cfg, layer=layer, **model_kw)
    except (ContractError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _split_set(items: Sequence[str]) -> list[tuple[str, str]]:
    pairs = []
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(args, default_preset: str) -> ModelConfig:
    cfg = PRESETS[args.preset or default_preset]
    pairs = []
    if args.config:
        pairs += read_config_file(args.config)
    pairs += _split_set(args.set or [])
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return apply_overrides(cfg, pairs)


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# --- output -----------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def emit(fmt: str, command: str, summary: dict, rows: list[dict], out) -> None:
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "command": command,
               "summary": _jsonable(summary), "rows": _jsonable(rows)}
        out.write(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        return
    if not rows:
        rows = [summary]
    cols = ["schema_version", "command"] + list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({"schema_version": SCHEMA_VERSION, "command": command, **_jsonable(r)})
    out.write(buf.getvalue())


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# --- subcommands ----------------------------------------------------------------

def cmd_validate(args, out) -> int:
    rep = harness.concentration_montecarlo(args.d, args.k, args.mu, args.sigma, args.trials,
                                      args.delta, seed=args.seed or 0,
                                      selector=args.selector, workers=args.threads)
    emit(args.output, "validate", rep.summary(), rep.rows(), out)
    if args.figures:
        plotting.plot_count_distribution(rep, Path(args.figures) / "validate_counts.png")
    _say(f"validate: d={rep.d} k={rep.k} trials={rep.trials} bound={rep.bound:.1f} "
         f"within={rep.frac_within:.4f} mean|count-k|/d={rep.mean_abs_rel_err:.2e} "
         f"-> {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def cmd_diag(args, out) -> int:
    seed = args.seed or 0
    if args.source == "gaussian":
        x = np.random.default_rng(seed).standard_normal(args.d)
        k = args.k
    else:
        cfg = resolve_config(args, "tiny")
        model = harness.build_model(cfg)
        cache = model.new_cache()
        rng = np.random.default_rng(cfg.seed)
        h = None
        for _ in range(args.steps):
            h, _ = harness.decode_step(model, rng.standard_normal(cfg.layer.d_model), cache)
        h = harness._rms_norm(h)
        x = model.layers[0].ffn.k1.T @ h[: cfg.layer.r_ff]
        k = cfg.layer.k_ff
    rep = harness.gaussian_fit_report(x, k)
    summary = {"source": args.source, "d": int(x.size), "k": int(k), **rep.summary()}
    emit(args.output, "diag", summary, rep.rows(), out)
    if args.figures:
        plotting.plot_fit(rep, Path(args.figures) / "diag_fit.png")
    _say(f"diag: exact cutoff {rep.empirical_cutoff:.4f}, fitted {rep.fitted_cutoff:.4f}, "
         f"relative gap {rep.relative_gap:.4f}")
    return 0


def cmd_flops(args, out) -> int:
    cfg = resolve_config(args, "gemma2-2b").layer
    std, spk, ratio = harness.flops_summary(cfg, args.nctx)
    summary = {"n_ctx": args.nctx, "standard": std.as_dict(), "spark": spk.as_dict(),
               "ratio": ratio, "ffn_ratio": std.ffn / spk.ffn,
               "attn_dot_ratio": std.attn_dot / spk.attn_dot}
    rows = [{"component": c, "standard": std.as_dict()[c], "spark": spk.as_dict()[c]}
            for c in ("ffn", "attn_dot", "attn_proj", "total")]
    emit(args.output, "flops", summary, rows, out)
    if args.figures:
        plotting.plot_flops(std, spk, Path(args.figures) / "flops.png")
    _say(f"flops @ n_ctx={args.nctx}: standard {std.total:,} vs sparse {spk.total:,} "
         f"(ratio {ratio:.3f}; FFN {std.ffn / spk.ffn:.3f})")
    return 0


def cmd_bench(args, out) -> int:
    cfg = resolve_config(args, "gemma2-2b").layer
    rep = harness.kernel_bench(cfg.d_model, cfg.d_ff, args.density, args.reps,
                               seed=args.seed or 0, tile=args.tile, threads=args.threads)
    rows = [_row_dict(r) for r in rep.rows]
    emit(args.output, "bench", rep.summary(), rows, out)
    if args.figures:
        plotting.plot_bench(rep, Path(args.figures) / "bench.png")
    _say(f"bench: density {args.density}, speedup masked_matvec "
         f"{rep.speedup('masked_matvec'):.2f}x, sparse_vecmat {rep.speedup('sparse_vecmat'):.2f}x")
    return 0


def _row_dict(row) -> dict:
    return {f.name: getattr(row, f.name) for f in fields(row)}


def cmd_demo(args, out) -> int:
    cfg = resolve_config(args, "tiny")
    model = harness.build_model(cfg)
    rep = harness.run_decode(model, args.steps, exact_attention=args.exact_attention)
    summary = {"preset": args.preset or "tiny", "seed": cfg.seed,
               "k_ff_over_d_ff": cfg.layer.k_ff / cfg.layer.d_ff, **rep.summary()}
    emit(args.output, "demo", summary, rep.rows(), out)
    if args.figures:
        plotting.plot_sparsity(rep, Path(args.figures) / "demo_sparsity.png")
    fr = ", ".join(f"{100 * f:.2f}%" for f in rep.per_layer_ffn_nonzero_frac)
    _say(f"demo: {args.steps} steps, FFN nonzeros per layer: {fr}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", choices=("json", "csv"), default="json")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    common.add_argument("--threads", type=int, default=default_threads(),
                        help=f"worker threads (default from ${THREADS_ENV}, else 1)")

    cfgopts = argparse.ArgumentParser(add_help=False)
    cfgopts.add_argument("--preset", choices=sorted(PRESETS))
    cfgopts.add_argument("--config", metavar="PATH", help="flat key = value config file")
    cfgopts.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config field (repeatable)")

    p = argparse.ArgumentParser(
        prog="actsparse",
        description="Validate, diagnose, and benchmark statistical top-k activation sparsity.",
        epilog=__doc__.split("\n\n", 1)[1].strip())
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", parents=[common],
                       help="Monte Carlo check of the top-k count concentration bound")
    v.add_argument("--d", type=int, default=13824)
    v.add_argument("--k", type=int, default=1106)
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--delta", type=float, default=0.01)
    v.add_argument("--mu", type=float, default=0.0)
    v.add_argument("--sigma", type=float, default=1.0)
    v.add_argument("--selector", choices=("stat", "exact"), default="stat")
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("diag", parents=[common, cfgopts],
                       help="Gaussian fit of activations: fitted vs exact cutoff")
    d.add_argument("--source", choices=("gaussian", "model"), default="gaussian")
    d.add_argument("--d", type=int, default=13824)
    d.add_argument("--k", type=int, default=1106)
    d.add_argument("--steps", type=int, default=8, help="decode steps before sampling (model)")
    d.set_defaults(func=cmd_diag)

    f = sub.add_parser("flops", parents=[common, cfgopts], help="FLOPs-per-token table")
    f.add_argument("--nctx", type=int, default=8192)
    f.set_defaults(func=cmd_flops)

    b = sub.add_parser("bench", parents=[common, cfgopts],
                       help="wall time of dense vs sparse kernels")
    b.add_argument("--density", type=float, default=0.08)
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--tile", type=int, default=64)
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("demo", parents=[common, cfgopts],
                       help="decode random tokens through a random-init model")
    m.add_argument("--steps", type=int, default=16)
    m.add_argument("--exact-attention", action="store_true",
                   help="use sort-based top-k for attention (oracle)")
    m.set_defaults(func=cmd_demo)
    return p


def run(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (UsageError, ContractError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        _say(f"error: {exc}")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
