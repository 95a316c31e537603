#!/usr/bin/env python3
"""Window-overlap experiment on a toy-model trace.

Decodes a long sequence with the toy transformer, splits the trailing
tokens into observation windows, and measures how much the last window's
top-p attended-token set agrees with earlier windows and with their union.
Writes overlap.csv into --out-dir.
"""

import argparse
from pathlib import Path

import numpy as np

from kvsim.analysis import window_overlap, write_overlap_csv
from kvsim.toy_model import ToyModelConfig, decode_full, init


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-generate", type=int, default=280)
    ap.add_argument("--n-windows", type=int, default=4)
    ap.add_argument("--window-size", type=int, default=32)
    ap.add_argument("--out-dir", default="out/overlap")
    args = ap.parse_args()

    model = init(ToyModelConfig(seed=args.seed))
    rng = np.random.default_rng(args.seed)
    prompt = rng.integers(0, 256, size=8).tolist()
    print(f"decoding {args.n_generate} tokens ...")
    _, trace, _ = decode_full(model, prompt, args.n_generate)

    fractions = tuple(round(0.05 * i, 2) for i in range(1, 21))
    report = window_overlap(trace, n_windows=args.n_windows,
                            window_size=args.window_size,
                            retention_fractions=fractions)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "overlap.csv", "w") as f:
        write_overlap_csv(report, f)
    mean_single = report.per_window.mean(axis=(0, 1))
    mean_union = report.union.mean(axis=0)
    print(f"wrote {out / 'overlap.csv'}")
    print("p      single   union")
    for pi, p in enumerate(fractions):
        print(f"{p:4.2f}   {mean_single[pi]:.4f}   {mean_union[pi]:.4f}")


if __name__ == "__main__":
    main()
