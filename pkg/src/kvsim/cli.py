"""Command-line front end.

Subcommands: simulate, compare, analyze, memory, toytrace, mask,
advantages. Flag values override keys from an optional TOML config file,
which overrides built-in defaults. Exit codes: 0 success, 1 usage,
2 I/O, 3 computation/invariant failure. KVSIM_WORKERS bounds the compare
worker pool; outputs are merged in grid order so results are identical at
any worker count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import io
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import analysis, engine, toy_model, train_support
from .engine import EvictionConfig, EvictionLog
from .trace import TraceFormatError, dump_header_json, read_trace_file, write_trace_file

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_COMPUTE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


_CONFIG_FIELDS = {f.name for f in fields(EvictionConfig)}


def _add_eviction_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", type=int, help="cache budget b")
    p.add_argument("--window", type=int, help="observation window w")
    p.add_argument("--stride", type=int, help="tokens between compressions s")
    p.add_argument("--alpha", type=float, help="memory decay rate")
    p.add_argument("--lambda", dest="lam", type=float, help="importance/redundancy weight")
    p.add_argument("--policy", choices=engine.POLICIES)
    p.add_argument("--form", dest="global_form", choices=("max", "mean", "sum"))
    p.add_argument("--redundancy", dest="use_redundancy", action="store_true", default=None)
    p.add_argument("--no-redundancy", dest="use_redundancy", action="store_false", default=None)
    p.add_argument("--tie-break", dest="tie_break", choices=engine.TIE_BREAKS)
    p.add_argument("--sink-tokens", dest="sink_tokens", type=int)
    p.add_argument("--compress-prompt", dest="compress_prompt", action="store_true", default=None)
    p.add_argument("--redundancy-threshold", dest="redundancy_threshold", type=float)
    p.add_argument("--recent-exempt", dest="redundancy_recent_exempt", type=int)
    p.add_argument("--pool-kernel", dest="pool_kernel", type=int)
    p.add_argument("--raw-scores", dest="normalize_scores", action="store_false", default=None)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        data = tomllib.load(f)
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def _eviction_config(args: argparse.Namespace) -> EvictionConfig:
    values = _load_config_file(getattr(args, "config", None))
    for name in _CONFIG_FIELDS:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val
    try:
        cfg = EvictionConfig(**values)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _eviction_config(args)
    trace = read_trace_file(args.trace)
    log, metrics = engine.run(trace, cfg)
    out = _out_dir(args)
    with open(out / "log.jsonl", "w") as f:
        log.to_jsonl(f)
    (out / "metrics.json").write_text(metrics.to_json() + "\n")
    print(f"simulate: {metrics.n_compressions} compressions, "
          f"retention ratio {metrics.retention_ratio:.6g}")
    return EXIT_OK


_POLICY_TOKENS = {
    "streaming": ("streaming_window", None, False),
    "streaming_window": ("streaming_window", None, False),
    "h2o": ("h2o", None, False),
    "snapkv": ("snapkv", None, False),
    "local": ("local", None, False),
    "rkv": ("rkv", None, False),
    "global-max": ("global", "max", False),
    "global-mean": ("global", "mean", False),
    "global-sum": ("global", "sum", False),
    "global-max+red": ("global", "max", True),
    "global-mean+red": ("global", "mean", True),
    "global-sum+red": ("global", "sum", True),
}


def _compare_cell(trace, token: str, budget: int, base: EvictionConfig):
    policy, form, use_red = _POLICY_TOKENS[token]
    cfg = EvictionConfig(
        **{
            **{f.name: getattr(base, f.name) for f in fields(EvictionConfig)},
            "policy": policy,
            "budget": budget,
            "use_redundancy": use_red,
            **({"global_form": form} if form else {}),
        }
    )
    cfg.validate()
    log, metrics = engine.run(trace, cfg)
    hist = analysis.position_density(log, max(trace.header.n_steps, 1), n_bins=10)
    mean_ms = (
        sum(metrics.per_event_ms) / len(metrics.per_event_ms) if metrics.per_event_ms else 0.0
    )
    return {
        "policy": token,
        "budget": budget,
        "retention_ratio": metrics.retention_ratio,
        "retained_pos_mean": hist.mean,
        "events": metrics.n_compressions,
        "mean_compress_ms": mean_ms,
        "error": "",
    }


def cmd_compare(args) -> int:
    if not args.policies:
        raise UsageError("empty policy list")
    if not args.budgets:
        raise UsageError("empty budget list")
    tokens = [t.strip() for t in args.policies.split(",") if t.strip()]
    budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    if not tokens or not budgets:
        raise UsageError("empty policy or budget list")
    for t in tokens:
        if t not in _POLICY_TOKENS:
            raise UsageError(f"unknown policy token {t!r}; known: {sorted(_POLICY_TOKENS)}")
    base = _eviction_config(args)
    trace = read_trace_file(args.trace)
    grid = [(t, b) for t in tokens for b in budgets]
    workers = max(1, int(os.environ.get("KVSIM_WORKERS", "1")))

    def cell(tb):
        token, budget = tb
        try:
            return _compare_cell(trace, token, budget, base)
        except Exception as exc:  # record the failing cell, keep the grid going
            return {
                "policy": token, "budget": budget, "retention_ratio": "",
                "retained_pos_mean": "", "events": "", "mean_compress_ms": 0.0,
                "error": f"{type(exc).__name__}: {exc}",
            }

    if workers == 1:
        rows = [cell(tb) for tb in grid]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(cell, grid))  # merged in deterministic grid order

    out = _out_dir(args)
    columns = ["policy", "budget", "retention_ratio", "retained_pos_mean", "events", "error"]
    if args.timing:
        columns.insert(5, "mean_compress_ms")
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_csv_field(row[c]) for c in columns) + "\n")
    (out / "compare.csv").write_text(buf.getvalue())
    print(f"compare: {len(rows)} cells -> {out / 'compare.csv'}")
    return EXIT_OK


def _csv_field(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    summary: dict = {"analysis": args.which}
    if args.which == "overlap":
        trace = read_trace_file(args.trace)
        fractions = tuple(float(p) for p in args.fractions.split(","))
        report = analysis.window_overlap(
            trace, n_windows=args.n_windows, window_size=args.window_size,
            retention_fractions=fractions,
        )
        with open(out / "overlap.csv", "w") as f:
            analysis.write_overlap_csv(report, f)
        summary["n_windows"] = report.n_windows
        summary["window_size"] = report.window_size
        summary["mean_union_overlap"] = float(report.union.mean())
    elif args.which == "sparsity":
        trace = read_trace_file(args.trace)
        thresholds = [float(p) for p in args.thresholds.split(",")]
        log = _load_log(args.log) if args.log else None
        values = analysis.sparsity(
            trace, thresholds, window=args.window or 16, tail_len=args.tail_len, log=log
        )
        with open(out / "sparsity.csv", "w") as f:
            analysis.write_sparsity_csv(values, thresholds, f)
        summary["thresholds"] = thresholds
        summary["mean_sparsity"] = float(values.mean())
    elif args.which == "density":
        log = _load_log(args.log)
        seq_len = args.seq_len or log.seq_len
        hist = analysis.position_density(log, seq_len, n_bins=args.bins)
        with open(out / "density.csv", "w") as f:
            analysis.write_density_csv(hist, f)
        summary["mean_position"] = hist.mean
        summary["n_retained"] = int(hist.counts.sum())
    elif args.which == "frequency":
        trace = read_trace_file(args.trace)
        log = _load_log(args.log)
        pairs = analysis.token_frequency(log, trace, layer=args.layer, head=args.head)
        with open(out / "frequency.csv", "w") as f:
            analysis.write_frequency_csv(pairs, f)
        summary["distinct_tokens"] = len(pairs)
    else:  # pragma: no cover
        raise UsageError(f"unknown analysis {args.which!r}")
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(f"analyze {args.which}: wrote {out}")
    return EXIT_OK


def _load_log(path: str) -> EvictionLog:
    with open(path) as f:
        return EvictionLog.from_jsonl(f)


def cmd_memory(args) -> int:
    report = train_support.memory_report(
        layers=args.layers, head_dim=args.head_dim, h_kv=args.kv_heads,
        seq_len=args.seq_len, bytes_per_el=args.bytes_per_el,
        budget=args.budget, stride=args.stride, batch=args.batch,
        window=args.window,
    )
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    if args.out_dir:
        out = _out_dir(args)
        (out / "memory.json").write_text(text + "\n")
    return EXIT_OK


def cmd_toytrace(args) -> int:
    cfg = toy_model.ToyModelConfig(
        n_layers=args.layers, d_model=args.d_model, n_q_heads=args.q_heads,
        n_kv_heads=args.kv_heads, head_dim=args.head_dim,
        vocab_size=args.vocab, rotary_base=args.rotary_base, seed=args.seed,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = toy_model.init(cfg)
    if args.prompt_ids:
        prompt = [int(t) for t in args.prompt_ids.split(",")]
    else:
        rng = np.random.default_rng(args.seed)
        prompt = rng.integers(0, cfg.vocab_size, size=args.prompt_len).tolist()
    _, trace, _ = toy_model.decode_full(model, prompt, args.n_generate)
    n = write_trace_file(trace, args.out)
    print(f"toytrace: wrote {n} bytes to {args.out} "
          f"({trace.header.n_steps} steps, {cfg.n_layers} layers)")
    return EXIT_OK


def cmd_mask(args) -> int:
    log = _load_log(args.log)
    seq_len = args.seq_len or log.seq_len
    masks = train_support.build_masks(log, seq_len)
    Path(args.out).write_text(masks.to_json() + "\n")
    print(f"mask: wrote {args.out} (seq_len {seq_len})")
    return EXIT_OK


def cmd_advantages(args) -> int:
    data = json.loads(Path(args.input).read_text())
    group = train_support.GroupSample(
        rewards=data["rewards"], truncated=data.get("truncated")
    )
    adv = train_support.grpo_advantages(group)
    out_text = json.dumps({"advantages": [float(a) for a in adv]}) + "\n"
    if args.out:
        Path(args.out).write_text(out_text)
    else:
        sys.stdout.write(out_text)
    return EXIT_OK


def cmd_traceinfo(args) -> int:
    print(dump_header_json(args.trace))
    return EXIT_OK


# -- wiring --------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="kvsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="replay a trace under one eviction config")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--config", help="TOML config file (flags override it)")
    _add_eviction_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="policy x budget grid over one trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--policies", required=True, help="comma-separated policy tokens")
    p.add_argument("--budgets", required=True, help="comma-separated budgets")
    p.add_argument("--timing", action="store_true",
                   help="include the (non-deterministic) timing column")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--config")
    _add_eviction_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="overlap / sparsity / density / frequency")
    p.add_argument("--which", required=True,
                   choices=("overlap", "sparsity", "density", "frequency"))
    p.add_argument("--trace")
    p.add_argument("--log")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--n-windows", type=int, default=4)
    p.add_argument("--window-size", type=int, default=128)
    p.add_argument("--fractions", default=",".join(str(p) for p in analysis.DEFAULT_FRACTIONS))
    p.add_argument("--thresholds", default="0.01,0.05")
    p.add_argument("--tail-len", type=int, default=512)
    p.add_argument("--window", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--layer", type=int)
    p.add_argument("--head", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("memory", help="closed-form cache/mask memory accounting")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--head-dim", type=int, required=True)
    p.add_argument("--kv-heads", type=int, required=True)
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--bytes-per-el", type=int, default=2)
    p.add_argument("--budget", type=int, default=512)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_memory)

    p = sub.add_parser("toytrace", help="emit a trace from the toy model")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--q-heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--rotary-base", type=float, default=10000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt-ids", help="comma-separated token ids")
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--n-generate", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toytrace)

    p = sub.add_parser("mask", help="export the sparse mask set of a log")
    p.add_argument("--log", required=True)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("advantages", help="group-standardized advantages from rewards JSON")
    p.add_argument("--input", required=True, help='JSON: {"rewards": [...], "truncated": [...]}')
    p.add_argument("--out")
    p.set_defaults(func=cmd_advantages)

    p = sub.add_parser("trace-info", help="dump a trace file header as JSON")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_traceinfo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TraceFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
