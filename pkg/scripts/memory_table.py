#!/usr/bin/env python3
"""Closed-form memory accounting across budgets for a reference model shape.

Defaults match a 28-layer model with head_dim 128 and 2 kv heads at 16k
context, bf16 cache, batch 128.
"""

import argparse

from kvsim.train_support import memory_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=28)
    ap.add_argument("--head-dim", type=int, default=128)
    ap.add_argument("--kv-heads", type=int, default=2)
    ap.add_argument("--seq-len", type=int, default=16384)
    ap.add_argument("--bytes-per-el", type=int, default=2)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--stride", type=int, default=128)
    ap.add_argument("--budgets", default="512,1024,2048")
    args = ap.parse_args()

    budgets = [int(b) for b in args.budgets.split(",")]
    first = memory_report(args.layers, args.head_dim, args.kv_heads, args.seq_len,
                          args.bytes_per_el, budgets[0], args.stride, args.batch)
    print(f"full kv cache: {first['kv_gib']:.4f} GiB "
          f"({first['kv_gb']:.2f} GB), batch {args.batch}")
    print(f"dense 1-byte masks at 4k, batch 16: "
          f"{memory_report(args.layers, args.head_dim, args.kv_heads, 4096, 1, budgets[0], args.stride, 16)['mask_gib']:.1f} GiB")
    print()
    print(f"{'budget':>8} {'compressed GiB':>15} {'savings %':>10} {'score-cache frac':>17}")
    for b in budgets:
        rep = memory_report(args.layers, args.head_dim, args.kv_heads, args.seq_len,
                            args.bytes_per_el, b, args.stride, args.batch)
        print(f"{b:>8} {rep['compressed_gib']:>15.4f} {rep['savings_percent']:>10.2f} "
              f"{rep['score_cache_fraction']:>17.6f}")


if __name__ == "__main__":
    main()
