#!/usr/bin/env python3
"""FLOPs and parameter table across ranks and grid sizes.

The granular form is never more expensive than plain low-rank adaptation at
equal rank; the saving is exactly (k-1)*r*T operations per batch.
"""

import argparse

from gralora.costs import gralora_flops, lora_flops, recommend_k


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=4096, help="square layer dimension")
    ap.add_argument("--tokens", type=int, default=1024)
    ap.add_argument("--ranks", type=int, nargs="+", default=[16, 32, 64, 128])
    args = ap.parse_args()

    m = n = args.size
    t = args.tokens
    print(f"layer {m}x{n}, {t} tokens")
    print(f"{'rank':>6}{'k*':>4}{'lora GFLOPs':>14}{'gralora GFLOPs':>16}{'saving':>10}")
    for r in args.ranks:
        k = recommend_k(r, m, n)
        lo = lora_flops(m, n, r, t)
        gr = gralora_flops(m, n, r, t, k)
        print(f"{r:>6}{k:>4}{lo / 1e9:>14.3f}{gr / 1e9:>16.3f}{(lo - gr) / lo:>9.4%}")


if __name__ == "__main__":
    main()
