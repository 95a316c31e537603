"""Command-line front end for trace capture."""

from __future__ import annotations

import argparse
import sys

from .capture import CaptureConfig, UnsupportedArchitectureError, batch_capture, capture


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvcapture", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capture", help="capture one generation into a GKVT file")
    _common_flags(p)
    p.add_argument("--prompt", help="prompt text (needs a loadable tokenizer)")
    p.add_argument("--prompt-ids", help="comma-separated token ids (skips tokenization)")
    p.add_argument("--out", default="capture.gkvt")
    p.set_defaults(cmd="capture")

    p = sub.add_parser("batch", help="capture one trace per line of a prompts file")
    _common_flags(p)
    p.add_argument("--prompts-file", required=True)
    p.add_argument("--out-dir", default="captures")
    p.set_defaults(cmd="batch")

    return parser


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="HF model id or local path")
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--layers", help="comma-separated layer indices (default: all)")
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--stop-on-eos", action="store_true")


def _config_from(args, output: str) -> CaptureConfig:
    layers = None
    if args.layers:
        layers = [int(x) for x in args.layers.split(",")]
    prompt_ids = None
    if getattr(args, "prompt_ids", None):
        prompt_ids = [int(x) for x in args.prompt_ids.split(",")]
    return CaptureConfig(
        model=args.model,
        prompt=getattr(args, "prompt", None),
        prompt_ids=prompt_ids,
        max_new_tokens=args.max_new_tokens,
        layers=layers,
        output=output,
        temperature=args.temperature,
        top_p=args.top_p,
        seed=args.seed,
        greedy=args.greedy,
        stop_on_eos=args.stop_on_eos,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "capture":
            path = capture(_config_from(args, args.out))
            print(f"wrote {path}")
        else:
            manifest = batch_capture(args.prompts_file, _config_from(args, "unused"),
                                     args.out_dir)
            print(f"wrote {manifest}")
        return 0
    except UnsupportedArchitectureError as exc:
        print(f"unsupported architecture: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
