"""Command-line surface.

Exit codes: 0 success, 1 check failure, 2 configuration/input error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, checks, model, tensor_io
from .attention import (
    WHOLE,
    AttentionParams,
    PyramidKernels,
    PyramidSpec,
    WindowGrid,
    gp_msa_sublayer,
    lw_msa_sublayer,
)
from .model import (
    ModelConfig,
    config_from_dict,
    forward,
    inflate_2d,
    inflate_2d_depthwise,
    init_random,
    load_manifest,
    preset,
    synthetic_clip,
)
from .numerics import ConfigError, NumericError, ShapeError
from .oracle import full_attention_ref

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parse_extent(text: str) -> tuple[int, ...]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"cannot parse extent {text!r}; use e.g. 32x224x224")
    if len(parts) != 3 or min(parts) < 1:
        raise ConfigError(f"extent needs three positive axes, got {text!r}")
    return parts


def _resolve_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = config_from_dict(data)
    else:
        cfg = preset(getattr(args, "preset", None) or "tiny")
    if getattr(args, "input", None):
        cfg = replace(cfg, input_extent=_parse_extent(args.input))
    if getattr(args, "classes", None):
        cfg = replace(cfg, num_classes=args.classes)
    cfg.map_extents()
    return cfg


def _emit(args, text: str) -> None:
    if getattr(args, "output", None):
        Path(args.output).write_text(text + "\n")
    else:
        print(text)


def _emit_report(args, report: analysis.CostReport) -> None:
    if args.format == "json":
        _emit(args, report.to_json())
    elif args.format == "csv":
        _emit(args, report.to_csv().rstrip("\n"))
    else:
        _emit(args, report.to_table())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_describe(args) -> int:
    cfg = _resolve_config(args)
    maps = cfg.map_extents()
    rows = []
    for i, stage in enumerate(cfg.stages, 1):
        ext = maps[i - 1]
        m = ext[0] * ext[1] * ext[2]
        s = stage.pyramid.prior_count(ext)
        scales = ", ".join(
            f"whole{tuple(ext)}" if sc == WHOLE else str(sc)
            for sc in stage.pyramid.scales)
        rows.append({
            "stage": i, "map": list(ext), "channels": stage.channels,
            "blocks": stage.blocks, "heads": cfg.heads(i - 1),
            "window": list(stage.window), "pyramid": scales,
            "merge": list(stage.merge), "M": m, "S": s,
        })
    if args.format == "json":
        _emit(args, json.dumps({
            "preset": cfg.preset_name, "input_extent": list(cfg.input_extent),
            "num_classes": cfg.num_classes, "head_dim": cfg.head_dim,
            "stages": rows}, indent=1))
        return EXIT_OK
    name = cfg.preset_name or "custom"
    lines = [f"model {name}: input {cfg.input_extent} -> "
             f"{cfg.num_classes} classes (head_dim {cfg.head_dim})"]
    for r in rows:
        ext = "x".join(str(e) for e in r["map"])
        win = "x".join(str(e) for e in r["window"])
        lines.append(
            f"  stage {r['stage']}: map {ext:>11}  C={r['channels']:<5} "
            f"blocks={r['blocks']}  heads={r['heads']:<3} window {win:<7} "
            f"M={r['M']:<7} S={r['S']:<5} pyramid [{r['pyramid']}]")
    _emit(args, "\n".join(lines))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    report = analysis.count_params(cfg)
    if args.format == "table":
        total = report.total_params()
        shares = "  ".join(f"{k}={v:.1%}"
                           for k, v in sorted(report.shares("params").items()))
        _emit(args, f"total params: {total:,} ({total / 1e6:.2f} M)\n"
                    f"shares: {shares}")
    else:
        _emit_report(args, report)
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _resolve_config(args)
    report = analysis.count_macs(cfg)
    if args.format == "table":
        _emit(args, report.to_table())
    else:
        _emit_report(args, report)
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = _resolve_config(args)
    state = init_random(cfg, args.seed)
    clip = synthetic_clip(cfg.input_extent, args.seed)
    logits = forward(clip, cfg, state)
    checksum = hashlib.sha256(np.ascontiguousarray(logits).tobytes()).hexdigest()
    stats = {
        "classes": int(logits.size),
        "mean": float(logits.mean()), "std": float(logits.std()),
        "min": float(logits.min()), "max": float(logits.max()),
        "checksum": checksum, "seed": args.seed,
    }
    if args.dump:
        tensor_io.save_tensor(args.dump, logits)
        stats["dump"] = args.dump
    if args.format == "json":
        _emit(args, json.dumps(stats, indent=1))
    else:
        _emit(args, "\n".join(f"{k}: {v}" for k, v in stats.items()))
    return EXIT_OK


def _report_checks(args, results) -> int:
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    if args.format == "json":
        _emit(args, json.dumps([{
            "name": r.name, "max_err": r.max_err, "tol": r.tol,
            "passed": r.passed} for r in results], indent=1))
    else:
        _emit(args, "\n".join(lines))
    if not ok:
        failing = next(r for r in results if not r.passed)
        print(f"check failed: {failing.name} (seed {args.seed})",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    results = checks.run_grad_checks(coords=args.coords, eps=args.eps,
                                     seed=args.seed,
                                     inject_fault=args.inject_fault)
    return _report_checks(args, results)


def cmd_oracle_check(args) -> int:
    results = checks.run_oracle_checks(instances=args.instances,
                                       seed=args.seed,
                                       inject_fault=args.inject_fault)
    return _report_checks(args, results)


def cmd_bench(args) -> int:
    ladder = [_parse_extent(e) for e in args.ladder.split(",")]
    rng = np.random.default_rng(args.seed)
    d, heads = 32, 1
    window = (2, 2, 2)
    spec = PyramidSpec(((1, 1, 1), (2, 2, 2)))
    rows = []
    for ext in ladder:
        grid = WindowGrid(ext, tuple(min(w, e) for w, e in zip(window, ext)))
        kernels = PyramidKernels.random(spec, ext, d, rng)
        p = AttentionParams.random(d, heads, rng)
        x = rng.standard_normal(ext + (d,))
        m = ext[0] * ext[1] * ext[2]

        dual_times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            lw_msa_sublayer(x, grid, p)
            gp_msa_sublayer(x, spec, kernels, p)
            dual_times.append(time.perf_counter() - t0)
        xf = x.reshape(m, d)
        full_times = []
        for _ in range(max(1, args.repeat // 2)):
            t0 = time.perf_counter()
            full_attention_ref(xf, xf, xf)
            full_times.append(time.perf_counter() - t0)

        macs_lw = analysis.cost_lw(*grid.window_extent, m, d)
        _, macs_gp = analysis.cost_gp(spec, ext, d)
        macs_full = analysis.cost_full(m, d)
        rows.append({
            "map": "x".join(str(e) for e in ext), "M": m,
            "dual_s_min": min(dual_times),
            "dual_s_median": sorted(dual_times)[len(dual_times) // 2],
            "full_s_min": min(full_times),
            "measured_ratio": min(full_times) / min(dual_times),
            "macs_dual": macs_lw + macs_gp, "macs_full": macs_full,
            "analytic_ratio": macs_full / (macs_lw + macs_gp),
        })
    if args.format == "json":
        _emit(args, json.dumps(rows, indent=1))
        return EXIT_OK
    lines = [f"{'map':>10} {'M':>6} {'dual_min_s':>11} {'full_min_s':>11} "
             f"{'meas_ratio':>10} {'macs_dual':>12} {'macs_full':>12} "
             f"{'anal_ratio':>10}"]
    for r in rows:
        lines.append(
            f"{r['map']:>10} {r['M']:>6} {r['dual_s_min']:>11.4f} "
            f"{r['full_s_min']:>11.4f} {r['measured_ratio']:>10.1f} "
            f"{r['macs_dual']:>12,} {r['macs_full']:>12,} "
            f"{r['analytic_ratio']:>10.1f}")
    lines.append("(full path is the loop-based reference; the measured ratio "
                 "mixes interpreter and complexity costs)")
    _emit(args, "\n".join(lines))
    return EXIT_OK


_INFLATABLE = {"conv2d": ("conv3d", inflate_2d),
               "dwconv2d": ("dwconv3d", inflate_2d_depthwise)}


def cmd_inflate(args) -> int:
    src = Path(args.input_dir)
    dst = Path(args.output_dir)
    manifest = load_manifest(src)
    dst.mkdir(parents=True, exist_ok=True)
    out_entries = []
    for entry in manifest["params"]:
        arr = tensor_io.load_tensor(src / entry["file"])
        kind = entry.get("kind", "matrix")
        if kind in _INFLATABLE:
            new_kind, fn = _INFLATABLE[kind]
            arr = fn(arr, args.t_extent)
            kind = new_kind
        tensor_io.save_tensor(dst / entry["file"], arr)
        out_entries.append({"name": entry["name"], "kind": kind,
                            "shape": list(arr.shape), "file": entry["file"]})
    (dst / model.MANIFEST_NAME).write_text(json.dumps(
        {"format": "dftk-weights", "version": 1, "params": out_entries},
        indent=1))
    _emit(args, f"inflated {len(out_entries)} tensors "
                f"(t_extent={args.t_extent}) -> {dst}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub, with_input=True):
    sub.add_argument("--preset", choices=model.PRESET_NAMES,
                     help="built-in configuration")
    sub.add_argument("--config", help="JSON config file (may set \"base\")")
    if with_input:
        sub.add_argument("--input", help="input extent TxHxW override")
    sub.add_argument("--format", choices=("table", "json", "csv"),
                     default="table")
    sub.add_argument("--output", help="write the report to a file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dftk",
        description="dual-level video transformer toolkit: describe configs, "
                    "count params/MACs, run forwards, verify oracles and "
                    "gradients, benchmark, and inflate 2D weights")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("DFK_THREADS", "0")) or None,
                        help="thread budget for optional parallel kernels "
                             "(mirrors DFK_THREADS); the current build ships "
                             "only the deterministic sequential path, so this "
                             "is validated and recorded only")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("describe", help="per-stage shapes, M and S")
    _add_common(p)
    p.set_defaults(func=cmd_describe)

    p = subs.add_parser("params", help="parameter counts")
    _add_common(p)
    p.set_defaults(func=cmd_params)

    p = subs.add_parser("flops", help="MAC counts for a single-view forward")
    _add_common(p)
    p.set_defaults(func=cmd_flops)

    p = subs.add_parser("forward", help="forward pass on a synthetic clip")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, help="override class count")
    p.add_argument("--dump", help="write the logits tensor container here")
    p.set_defaults(func=cmd_forward)

    p = subs.add_parser("gradcheck", help="analytic vs finite-difference "
                                          "gradients")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")
    p.add_argument("--inject-fault", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("oracle-check", help="fast paths vs brute-force "
                                             "references")
    p.add_argument("--instances", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")
    p.add_argument("--inject-fault", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle_check)

    p = subs.add_parser("bench", help="dual-level attention vs the quadratic "
                                      "reference")
    p.add_argument("--ladder", default="2x4x4,4x8x8,4x12x12",
                   help="comma-separated map extents")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("inflate", help="replicate 2D kernels along time")
    p.add_argument("input_dir", help="source weight-manifest directory")
    p.add_argument("output_dir", help="destination directory")
    p.add_argument("--t-extent", type=int, default=1)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--output")
    p.set_defaults(func=cmd_inflate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        os.environ["DFK_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
