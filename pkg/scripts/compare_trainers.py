#!/usr/bin/env python3
"""Paired-seed comparison of adapters on a block-heterogeneous target.

Each seed builds one teacher (a grid of independently scaled low-rank blocks)
and trains every method against it from matched inits, so differences are
method effects rather than task luck.
"""

import argparse

import numpy as np

from gralora.adapters import AdaptedLayer, init_adapter
from gralora.training import OptimizerState, make_task, train


def run(kind, k, seed, args):
    task = make_task("block_heterogeneous", args.size, args.size, seed=seed,
                     rank=args.teacher_rank, grid=args.grid)
    adapter = init_adapter(kind, args.size, args.size, args.rank, k=k,
                           seed=10_000 + seed)
    layer = AdaptedLayer(task.w0, adapter)
    opt = OptimizerState.create("sgd", adapter, lr=args.lr)
    return train(layer, task, epochs=args.epochs, optimizer=opt).final_eval_loss


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--rank", type=int, default=16)
    ap.add_argument("--grid", type=int, default=4, help="teacher block grid")
    ap.add_argument("--teacher-rank", type=int, default=4)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--k", type=int, nargs="+", default=[2, 4], dest="k_values")
    args = ap.parse_args()

    methods = [("lora", 1)] + [("gralora", k) for k in args.k_values]
    results = {name_k: [] for name_k in methods}
    for seed in range(args.seeds):
        for name, k in methods:
            results[(name, k)].append(run(name, k, seed, args))

    base = np.mean(results[("lora", 1)])
    print(f"{'method':<12}{'k':>3}{'mean eval loss':>16}{'vs lora':>10}")
    for (name, k), losses in results.items():
        mean = float(np.mean(losses))
        print(f"{name:<12}{k:>3}{mean:>16.4f}{mean / base:>10.3f}")


if __name__ == "__main__":
    main()
