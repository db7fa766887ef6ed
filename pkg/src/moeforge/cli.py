"""Command-line surface.

Subcommands: pretrain, tune, ablate, analyze, gradcheck, bench-dispatch,
split-inspect. Every run writes a manifest.json holding the resolved config,
effective seed, thread count, and input hashes, so a run is reproducible from
its manifest alone. Commands never mutate their input files.

Exit codes are stable API: 0 ok, 2 invalid config or unreadable input,
3 divergence, 4 step-0 identity violation, 5 gradcheck failure. The bench
command exits 1 if the batched and looped dispatch paths disagree.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (
    co_selection,
    expert_loading,
    pattern_specialization,
    write_loading_csv,
    write_matrix_csv,
    write_summary_json,
)
from .ffn import ffn_forward_batch, init_ffn
from .harness import (
    STAGE_MOE_TUNE,
    STAGE_PRETRAIN,
    DivergenceError,
    IdentityViolation,
    ToyModel,
    TrainConfig,
    ablate_tuning_subsets,
    init_toy_model,
    make_task,
    moe_tune,
    pretrain,
    run_gradcheck,
)
from .moe import MoeConfig, dispatch_batch, dispatch_loop, expand_supernet, load_balance_loss, split_ffn
from .numkernel import STREAM_BENCH, make_rng
from .serialize import (
    FormatError,
    load_ffn,
    load_toy_model,
    read_trace_jsonl,
    save_toy_model,
    write_trace_jsonl,
)

ENV_THREADS = "MOEFORGE_THREADS"


class ConfigError(ValueError):
    """Invalid or malformed run configuration; message names the offending path."""


_NUMBER = (int, float)
_SCHEMA = {
    "task": {
        "n_patterns": (int, 4),
        "token_dim": (int, 8),
        "noise_std": (_NUMBER, 0.1),
        "center_scale": (_NUMBER, 3.0),
        "seed": (int, 1),
    },
    "model": {
        "hidden_dim": (int, 32),
        "activation": (str, "relu"),
        "seed": (int, 5),
    },
    "moe": {
        "n_replicas": (int, 8),
        "granularity": (int, 2),
        "top_k": (int, 0),
        "seed": (int, 2),
    },
    "train": {
        "lr": (_NUMBER, 0.05),
        "lr_head": (_NUMBER + (type(None),), None),
        "lr_router": (_NUMBER + (type(None),), None),
        "steps": (int, 1500),
        "batch": (int, 64),
        "alpha": (_NUMBER, 0.01),
        "optimizer": (str, "sgd"),
        "eval_tokens": (int, 10000),
        "probe_tokens": (int, 512),
        "seed": (int, 3),
    },
}
_TRAINABLE_DEFAULTS = {"moe": True, "head": True, "map": False}


def default_config() -> dict:
    cfg = {section: {key: entry[1] for key, entry in keys.items()}
           for section, keys in _SCHEMA.items()}
    cfg["train"]["trainable"] = dict(_TRAINABLE_DEFAULTS)
    return cfg


def load_config(path) -> dict:
    """Read a JSON config, merge over defaults, reject unknown keys and bad types."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = default_config()
    for section, content in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section '{section}'")
        if not isinstance(content, dict):
            raise ConfigError(f"{path}: section '{section}' must be an object")
        for key, value in content.items():
            if section == "train" and key == "trainable":
                if not isinstance(value, dict):
                    raise ConfigError(f"{path}: 'train.trainable' must be an object")
                for part, flag in value.items():
                    if part not in _TRAINABLE_DEFAULTS:
                        raise ConfigError(f"{path}: unknown key 'train.trainable.{part}'")
                    if not isinstance(flag, bool):
                        raise ConfigError(f"{path}: 'train.trainable.{part}' must be a boolean")
                    cfg["train"]["trainable"][part] = flag
                continue
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{section}.{key}'")
            expected = _SCHEMA[section][key][0]
            if not isinstance(value, expected) or isinstance(value, bool):
                raise ConfigError(f"{path}: '{section}.{key}' has wrong type {type(value).__name__}")
            cfg[section][key] = value
    return cfg


def _apply_seed_override(cfg: dict, seed: int | None) -> dict:
    if seed is None:
        return cfg
    for section in ("task", "model", "moe", "train"):
        cfg[section]["seed"] = seed
    return cfg


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        threads = args.threads
    else:
        threads = int(os.environ.get(ENV_THREADS, "1"))
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    return threads


def _dtype_of(args):
    return np.float32 if getattr(args, "f32", False) else np.float64


def write_manifest(out_dir: Path, command: str, args, resolved_config=None,
                   extra_inputs: dict | None = None) -> None:
    inputs = {}
    config_path = getattr(args, "config", None)
    if config_path:
        inputs["config"] = {"path": str(config_path),
                            "sha256": hashlib.sha256(Path(config_path).read_bytes()).hexdigest()}
    for name, path in (extra_inputs or {}).items():
        inputs[name] = {"path": str(path),
                        "sha256": hashlib.sha256(Path(path).read_bytes()).hexdigest()}
    manifest = {
        "command": command,
        "package_version": __version__,
        "inputs": inputs,
        "resolved_config": resolved_config,
        "seed": getattr(args, "seed", None),
        "threads": _resolve_threads(args),
        "dtype": "f32" if getattr(args, "f32", False) else "f64",
        "out_dir": str(out_dir),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_curves_csv(path, curves: list[dict]) -> None:
    columns = ["step", "batch_mse", "probe_mse", "probe_mse_smoothed"]
    if curves and "batch_aux" in curves[0]:
        columns.append("batch_aux")
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in curves:
            f.write(",".join(repr(row[c]) if c != "step" else str(row[c]) for c in columns) + "\n")


def _write_metrics_json(path, metrics: dict) -> None:
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_labels_csv(path, labels) -> None:
    with open(path, "w") as f:
        f.write("token_id,label\n")
        for t, lab in enumerate(labels):
            f.write(f"{t},{int(lab)}\n")


def _build_task_and_train(cfg: dict, args, stage: str):
    dtype = _dtype_of(args)
    task = make_task(
        n_patterns=cfg["task"]["n_patterns"],
        token_dim=cfg["task"]["token_dim"],
        noise_std=cfg["task"]["noise_std"],
        seed=cfg["task"]["seed"],
        center_scale=cfg["task"]["center_scale"],
        dtype=dtype,
    )
    trainable = cfg["train"]["trainable"]
    train_cfg = TrainConfig(
        lr=cfg["train"]["lr"],
        lr_head=cfg["train"]["lr_head"],
        lr_router=cfg["train"]["lr_router"],
        steps=cfg["train"]["steps"],
        batch=cfg["train"]["batch"],
        alpha=cfg["train"]["alpha"],
        stage=stage,
        optimizer=cfg["train"]["optimizer"],
        trainable_moe=trainable["moe"],
        trainable_head=trainable["head"],
        trainable_map=trainable["map"],
        eval_tokens=cfg["train"]["eval_tokens"],
        probe_tokens=cfg["train"]["probe_tokens"],
        threads=_resolve_threads(args),
        seed=cfg["train"]["seed"],
        identity_tol=1e-4 if getattr(args, "f32", False) else 1e-9,
    )
    return task, train_cfg


def cmd_pretrain(args) -> int:
    cfg = _apply_seed_override(load_config(args.config), args.seed)
    task, train_cfg = _build_task_and_train(cfg, args, STAGE_PRETRAIN)
    model = init_toy_model(cfg["task"]["token_dim"], cfg["model"]["hidden_dim"],
                           cfg["model"]["seed"], cfg["model"]["activation"], _dtype_of(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(task, model, train_cfg)
    write_manifest(out, "pretrain", args, cfg)
    save_toy_model(out / "base.ckpt", result.model)
    _write_curves_csv(out / "curves.csv", result.curves)
    _write_metrics_json(out / "metrics.json", {
        "mse": result.final_eval.mse,
        "steps": train_cfg.steps,
        "stage": STAGE_PRETRAIN,
    })
    print(f"pretrain done: eval mse {result.final_eval.mse:.6g} -> {out}")
    return 0


def _load_base(path) -> ToyModel:
    base = load_toy_model(path)
    if base.kind != "dense":
        raise ConfigError(f"{path}: base checkpoint must hold a dense model")
    return base


def cmd_tune(args) -> int:
    cfg = _apply_seed_override(load_config(args.config), args.seed)
    task, train_cfg = _build_task_and_train(cfg, args, STAGE_MOE_TUNE)
    base = _load_base(args.base)
    if base.token_dim != cfg["task"]["token_dim"] or base.block.hidden_dim != cfg["model"]["hidden_dim"]:
        raise ConfigError(
            f"{args.base}: checkpoint dims ({base.token_dim}, {base.block.hidden_dim}) "
            f"do not match config ({cfg['task']['token_dim']}, {cfg['model']['hidden_dim']})"
        )
    moe_cfg = MoeConfig(
        token_dim=cfg["task"]["token_dim"],
        hidden_dim=cfg["model"]["hidden_dim"],
        n_replicas=cfg["moe"]["n_replicas"],
        granularity=cfg["moe"]["granularity"],
        top_k=cfg["moe"]["top_k"],
        seed=cfg["moe"]["seed"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = moe_tune(task, base, moe_cfg, train_cfg)
    write_manifest(out, "tune", args, cfg, extra_inputs={"base": args.base})
    save_toy_model(out / "tuned.ckpt", result.model)
    _write_curves_csv(out / "curves.csv", result.curves)
    _write_metrics_json(out / "metrics.json", result.metrics)
    write_trace_jsonl(out / "trace.jsonl", result.final_eval.trace)
    _write_labels_csv(out / "labels.csv", result.final_eval.labels)
    write_matrix_csv(out / "coselection.csv", result.coselection)
    write_loading_csv(out / "loading.csv", expert_loading(result.final_eval.trace))
    print(f"tune done: base mse {result.metrics['base_mse']:.6g} -> "
          f"tuned mse {result.metrics['mse']:.6g}, nmi {result.metrics['nmi']:.3f} -> {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_seed_override(load_config(args.config), args.seed)
    task, train_cfg = _build_task_and_train(cfg, args, STAGE_MOE_TUNE)
    base = _load_base(args.base)
    moe_cfg = MoeConfig(
        token_dim=cfg["task"]["token_dim"],
        hidden_dim=cfg["model"]["hidden_dim"],
        n_replicas=cfg["moe"]["n_replicas"],
        granularity=cfg["moe"]["granularity"],
        top_k=cfg["moe"]["top_k"],
        seed=cfg["moe"]["seed"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate_tuning_subsets(task, base, moe_cfg, train_cfg)
    write_manifest(out, "ablate", args, cfg, extra_inputs={"base": args.base})
    with open(out / "ablation.csv", "w") as f:
        f.write("combo,mse,base_mse,aux_loss,nmi\n")
        for row in rows:
            f.write(f"{row['combo']},{row['mse']!r},{row['base_mse']!r},"
                    f"{row['aux_loss']!r},{row['nmi']!r}\n")
    _write_metrics_json(out / "ablation.json", {"rows": rows})
    for row in rows:
        print(f"{row['combo']:>14}: mse {row['mse']:.6g}")
    return 0


def cmd_analyze(args) -> int:
    trace = read_trace_jsonl(args.trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loading = expert_loading(trace)
    nmi = None
    if args.labels:
        labels = []
        with open(args.labels) as f:
            header = f.readline()
            if header.strip() != "token_id,label":
                raise ConfigError(f"{args.labels}: expected header 'token_id,label'")
            for line in f:
                if line.strip():
                    labels.append(int(line.split(",")[1]))
        nmi = pattern_specialization(trace, np.array(labels))
    matrix = co_selection(trace, normalize=args.normalize)
    coselection_path = out / "coselection.csv"
    write_matrix_csv(coselection_path, matrix)
    write_loading_csv(out / "loading.csv", loading)
    inputs = {"trace": args.trace}
    if args.labels:
        inputs["labels"] = args.labels
    write_manifest(out, "analyze", args, None, extra_inputs=inputs)
    write_summary_json(out / "summary.json", {
        "loss": load_balance_loss(trace),
        "nmi": nmi,
        "loading": [float(x) for x in loading.fractions],
        "coselection_path": str(coselection_path),
    })
    print(f"analyze done: balance loss {load_balance_loss(trace):.6g} -> {out}")
    return 0


def _parse_sizes(sizes_arg: str | None):
    if sizes_arg is None:
        return None
    dims = []
    for item in sizes_arg.split(","):
        parts = item.strip().lower().split("x")
        if len(parts) != 4:
            raise ConfigError(f"--sizes entry {item!r}: expected DxHxNxK")
        token_dim, hidden, replicas, granularity = (int(p) for p in parts)
        if token_dim > 64 or hidden > 64:
            raise ConfigError(f"--sizes entry {item!r}: gradcheck sizes are capped at 64")
        dims.append((token_dim, hidden, replicas, granularity))
    return dims


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed if args.seed is not None else 0,
                           n_instances=args.instances, alpha=args.alpha,
                           dims=_parse_sizes(args.sizes))
    for group, err in sorted(report["groups"].items()):
        print(f"group {group:<8} max relative error {err:.3e}")
    print(f"router grads with alpha=0: max |g| = {report['alpha_zero_router_max']:.1e}")
    if report["passed"]:
        print(f"PASS (tolerance {report['tol']:.0e})")
        return 0
    worst = report["worst"]
    print(f"FAIL (tolerance {report['tol']:.0e}): worst offender {worst['group']}:"
          f"{worst['name']}{worst['index']} analytic {worst['analytic']!r} fd {worst['fd']!r}",
          file=sys.stderr)
    return 5


def cmd_bench_dispatch(args) -> int:
    threads = _resolve_threads(args)
    dtype = _dtype_of(args)
    rng = make_rng(args.seed if args.seed is not None else 0, STREAM_BENCH)
    base = init_ffn(args.token_dim, args.hidden, rng, dtype=dtype)
    cfg = MoeConfig(token_dim=args.token_dim, hidden_dim=args.hidden,
                    n_replicas=args.replicas, granularity=args.granularity,
                    top_k=args.top_k, seed=args.seed if args.seed is not None else 0)
    layer = expand_supernet(base, cfg)
    # nudge the router off the grouped init so expert loads are realistic
    nudge = (0.5 * rng.normal(size=layer.router.w_r.shape) / np.sqrt(args.token_dim)).astype(dtype)
    layer.router.w_r = layer.router.w_r + nudge
    tokens = rng.normal(size=(args.tokens, args.token_dim)).astype(dtype)

    t0 = time.perf_counter()
    out_batched, trace_batched = dispatch_batch(layer, tokens, threads)
    batched_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    out_loop, trace_loop = dispatch_loop(layer, tokens)
    loop_s = time.perf_counter() - t0

    identical = (np.array_equal(out_batched, out_loop)
                 and np.array_equal(trace_batched.selected, trace_loop.selected)
                 and np.array_equal(trace_batched.scores, trace_loop.scores))
    print(f"equivalence: {'identical' if identical else 'MISMATCH'}")
    if not identical:
        print("batched dispatch does not match the per-token loop; timings withheld",
              file=sys.stderr)
        return 1
    n = max(args.tokens, 1)
    print(f"naive loop      : {loop_s:.3f} s  ({n / loop_s:,.0f} tokens/s)")
    print(f"batched dispatch: {batched_s:.3f} s  ({n / batched_s:,.0f} tokens/s)")
    print(f"speedup: {loop_s / batched_s:.2f}x (threads={threads})")
    return 0


def cmd_split_inspect(args) -> int:
    path = Path(args.ckpt)
    try:
        base = load_ffn(path)
    except FormatError:
        model = load_toy_model(path)
        if model.kind != "dense":
            raise ConfigError(f"{path}: checkpoint already holds a mixture layer")
        base = model.block
    try:
        experts = split_ffn(base, args.granularity)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    print(f"base ffn: token_dim {base.token_dim}, hidden_dim {base.hidden_dim}, "
          f"activation {base.activation}")
    for j, e in enumerate(experts):
        print(f"expert {j}: w1 {e.w1.shape}, b1 {e.b1.shape}, w2 {e.w2.shape}, "
              f"b2 = base b2 / {args.granularity}")
    probe_rng = make_rng(args.seed if args.seed is not None else 0, STREAM_BENCH)
    probe = probe_rng.normal(size=(100, base.token_dim)).astype(base.w1.dtype)
    full = ffn_forward_batch(base, probe)
    total = np.zeros_like(full)
    for e in experts:
        total += ffn_forward_batch(e, probe)
    residual = float(np.max(np.abs(total - full)))
    print(f"max |sum of experts - base| over 100 probe tokens: {residual:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moeforge",
                                     description="Mixture-of-experts layer mechanics and toy tuning harness")
    parser.add_argument("--version", action="version", version=f"moeforge {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override every section seed in the config")
    common.add_argument("--threads", type=int, default=None,
                        help=f"dispatch thread count (default: ${ENV_THREADS} or 1)")
    common.add_argument("--f32", action="store_true", help="32-bit float mode (relaxed tolerances)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="stage A: train the dense base model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", parents=[common], help="stage B: expand to a supernet and fine-tune")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True, help="base checkpoint from pretrain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("ablate", parents=[common], help="tune once per trainable-subset combo")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", parents=[common], help="statistics from an exported trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--labels", default=None, help="token_id,label csv for specialization NMI")
    p.add_argument("--normalize", choices=["max", "tokens"], default="max")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the gradients")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--sizes", default=None,
                   help="comma-separated DxHxNxK instance shapes, e.g. 8x16x2x2,16x32x4x2")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-dispatch", parents=[common],
                       help="equivalence + throughput: batched dispatch vs per-token loop")
    p.add_argument("--tokens", type=int, default=8192)
    p.add_argument("--token-dim", type=int, default=256)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--replicas", type=int, default=8)
    p.add_argument("--granularity", type=int, default=2)
    p.add_argument("--top-k", type=int, default=0)
    p.set_defaults(func=cmd_bench_dispatch)

    p = sub.add_parser("split-inspect", parents=[common],
                       help="show how a checkpoint's FFN slices into experts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--granularity", type=int, required=True)
    p.set_defaults(func=cmd_split_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, FormatError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except IdentityViolation as e:
        print(f"identity violation: {e}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())
