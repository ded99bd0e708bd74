"""Command line front end: every experiment as a reproducible subcommand.

All randomness descends from one root seed through named seed sequences, so
re-running any subcommand with the same config reproduces its output files
byte for byte. CSVs carry a comment line with the tool version and a config
hash; JSON artifacts embed the full config echo.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .adapters import (
    AdaptedLayer,
    ConfigError,
    adapter_kind,
    effective_rank,
    factors,
    fused_update,
    init_adapter,
    randomize_factors,
    to_regularized_form,
)
from .config import ExperimentConfig, load_config, validate_experiment
from .costs import cost_report, recommend_k
from .gradients import check_gradients, forward
from .linalg import ShapeError, frobenius_norm
from .outliers import (
    MetricError,
    OutlierSpec,
    deviation_cell,
    intersecting_block_columns,
    locality_profile,
    summarize_sweep,
)
from .training import OptimizerState, make_task, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2

ENV_OUT_DIR = "GRALORA_OUT"

EQUIVALENCE_REL_TOL = 1e-12


def _child_seed(*parts: int) -> int:
    rng = np.random.default_rng(np.random.SeedSequence(list(parts)))
    return int(rng.integers(2**63))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_table(path: Path, cfg: ExperimentConfig, columns: Sequence[str], rows) -> None:
    lines = [f"# gralora {__version__} config={cfg.hash()}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, args) -> int:
    gc = cfg.gradcheck
    fault = getattr(args, "fault_flip_sign", None)
    reports = {}
    matched_fault = False
    for idx, kind in enumerate(("lora", "gralora", "hybrid")):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 100 + idx]))
        adapter = init_adapter(
            kind,
            gc.m,
            gc.n,
            gc.r,
            k=1 if kind == "lora" else gc.k,
            ratio=cfg.adapter.ratio if kind == "hybrid" else None,
            seed=_child_seed(cfg.seed, idx),
        )
        # a zero output-side factor would make its own perturbations invisible
        adapter = randomize_factors(adapter, rng)
        layer = AdaptedLayer(rng.standard_normal((gc.m, gc.n)) / np.sqrt(gc.n), adapter)
        x = rng.standard_normal((gc.n, gc.t))
        sign_flip = fault if fault and fault in factors(adapter) else None
        matched_fault = matched_fault or sign_flip is not None
        report = check_gradients(layer, x, h=gc.h, tol=gc.tol, sign_flip=sign_flip)
        reports[kind] = report.to_json_dict()
    if fault and not matched_fault:
        raise ConfigError(f"fault factor {fault!r} matches no adapter kind")
    passed = all(r["passed"] for r in reports.values())
    _write_json(out / "gradcheck.json", {
        "config": cfg.to_json_dict(),
        "passed": passed,
        "reports": reports,
        "version": __version__,
    })
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_equivalence(cfg: ExperimentConfig, out: Path, args) -> int:
    m, n = cfg.geometry.m, cfg.geometry.n
    r = cfg.adapter.r
    cells = []
    for k in sorted(cfg.sweep.k_values):
        for seed in sorted(cfg.sweep.seeds):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, k, seed]))
            adapter = randomize_factors(
                init_adapter("gralora", m, n, r, k=k, seed=_child_seed(cfg.seed, k, seed)),
                rng,
            )
            target = fused_update(adapter) / adapter.s
            a_g, b_g = to_regularized_form(adapter)
            rel = frobenius_norm(b_g @ a_g.T - target) / frobenius_norm(target)
            nnz_a, nnz_b = int(np.count_nonzero(a_g)), int(np.count_nonzero(b_g))
            rank = effective_rank(adapter)
            expected_rank = min(k * r, m, n)
            cells.append({
                "k": k,
                "seed": seed,
                "rel_error": rel,
                "nnz_a": nnz_a,
                "nnz_a_expected": n * r,
                "nnz_b": nnz_b,
                "nnz_b_expected": m * r,
                "effective_rank": rank,
                "expected_rank": expected_rank,
                "ok": bool(
                    rel <= EQUIVALENCE_REL_TOL
                    and nnz_a == n * r
                    and nnz_b == m * r
                    and rank == expected_rank
                ),
            })
    passed = all(c["ok"] for c in cells)
    _write_json(out / "equivalence.json", {
        "config": cfg.to_json_dict(),
        "passed": passed,
        "cells": cells,
        "version": __version__,
    })
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_rank_analysis(cfg: ExperimentConfig, out: Path, args) -> int:
    m, n = cfg.geometry.m, cfg.geometry.n
    rows = []
    all_match = True
    for r in sorted(cfg.sweep.ranks):
        for k in sorted(cfg.sweep.k_values):
            for seed in sorted(cfg.sweep.seeds):
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, k, seed]))
                adapter = randomize_factors(
                    init_adapter("gralora" if k > 1 else "lora", m, n, r, k=k,
                                 seed=_child_seed(cfg.seed, r, k, seed)),
                    rng,
                )
                rank = effective_rank(adapter)
                expected = min(k * r, m, n)
                saturated = k * r > min(m, n)
                all_match = all_match and rank == expected
                rows.append((r, k, seed, rank, expected, saturated))
    _write_table(
        out / "rank_analysis.csv", cfg,
        ("r", "k", "seed", "effective_rank", "expected_rank", "saturated"),
        rows,
    )
    _write_json(out / "rank_analysis.json", {
        "config": cfg.to_json_dict(),
        "all_match": all_match,
        "cells": [
            {"r": r, "k": k, "seed": s, "effective_rank": er, "expected_rank": ex,
             "saturated": sat}
            for r, k, s, er, ex, sat in rows
        ],
        "version": __version__,
    })
    return EXIT_OK if all_match else EXIT_CHECK_FAILED


def cmd_cost(cfg: ExperimentConfig, out: Path, args) -> int:
    g = cfg.geometry
    if cfg.adapter.kind == "hybrid":
        raise ConfigError("cost model covers lora and gralora kinds only")
    report = cost_report(
        cfg.adapter.kind, g.m, g.n, cfg.adapter.r, g.t,
        k=cfg.adapter.k if cfg.adapter.kind == "gralora" else 1,
        dtype_bytes=args.dtype_bytes,
    )
    _write_json(out / "cost.json", {
        "config": cfg.to_json_dict(),
        "report": report.to_json_dict(),
        "recommended_k": recommend_k(cfg.adapter.r, g.m, g.n),
        "version": __version__,
    })
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    g, tc = cfg.geometry, cfg.train
    spec = None
    if tc.structure == "outlier_aligned":
        spec = OutlierSpec(cfg.outlier.channels, cfg.outlier.magnitude_ratio)
    task = make_task(
        tc.structure, g.m, g.n, seed=cfg.seed, noise_std=tc.noise_std,
        rank=tc.teacher_rank, grid=tc.grid, outlier=spec,
    )
    adapter = init_adapter(
        cfg.adapter.kind, g.m, g.n, cfg.adapter.r,
        k=cfg.adapter.k if cfg.adapter.kind != "lora" else 1,
        alpha=cfg.adapter.alpha, ratio=cfg.adapter.ratio,
        seed=_child_seed(cfg.seed, 7),
    )
    layer = AdaptedLayer(task.w0, adapter)
    opt = OptimizerState.create(
        cfg.optimizer.kind, adapter, lr=cfg.optimizer.lr,
        beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
        weight_decay=cfg.optimizer.weight_decay,
    )
    report = train(
        layer, task, epochs=tc.epochs, batch_size=tc.batch_size,
        steps_per_epoch=tc.steps_per_epoch, optimizer=opt,
    )
    _write_json(out / "train_report.json", {
        "config": cfg.to_json_dict(),
        "report": report.to_json_dict(),
        "adapter_kind": adapter_kind(adapter),
        "version": __version__,
    })
    _write_table(
        out / "train_losses.csv", cfg, ("epoch", "mean_loss"),
        [(i, loss) for i, loss in enumerate(report.epoch_losses)],
    )
    return EXIT_CHECK_FAILED if report.diverged else EXIT_OK


def cmd_outlier_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    m, n = cfg.geometry.m, cfg.geometry.n
    spec = OutlierSpec(cfg.outlier.channels, cfg.outlier.magnitude_ratio)
    spec.validate_for(n)
    protocol = cfg.protocol.to_protocol()

    keys = sorted(
        (rank, k, seed)
        for rank in cfg.sweep.ranks
        for k in cfg.sweep.k_values
        for seed in cfg.sweep.seeds
    )
    work = [(m, n, rank, k, spec, seed, cfg.seed, protocol) for rank, k, seed in keys]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            cells = list(pool.map(_deviation_star, work, chunksize=4))
    else:
        cells = [_deviation_star(w) for w in work]
    cells.sort(key=lambda c: (c.rank, c.k, c.seed))
    _write_table(
        out / "deviation.csv", cfg,
        ("method", "rank", "k", "seed", "cosine_distance", "frobenius_gap"),
        [(c.method, c.rank, c.k, c.seed, c.cosine_distance, c.frobenius_gap) for c in cells],
    )

    loc_rows = []
    for k in sorted(kv for kv in cfg.sweep.k_values if kv > 1):
        cols = set(intersecting_block_columns(spec, n, k))
        for seed in sorted(cfg.sweep.seeds):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5, k, seed]))
            w0 = rng.standard_normal((m, n)) / np.sqrt(n)
            delta = rng.standard_normal((m, n)) / np.sqrt(n)
            adapter = randomize_factors(
                init_adapter("gralora", m, n, cfg.adapter.r, k=k,
                             seed=_child_seed(cfg.seed, 5, k, seed)),
                rng,
            )
            layer = AdaptedLayer(w0, adapter)
            x = rng.standard_normal((n, protocol.t))
            x[list(spec.channel_indices), :] *= spec.magnitude_ratio
            dy = (forward(layer, x) - (w0 + delta) @ x) / protocol.t
            prof = locality_profile(layer, x, dy)
            for i in range(k):
                for j in range(k):
                    loc_rows.append(
                        (k, seed, i, j, prof.db_norms[i, j], prof.da_norms[i, j], j in cols)
                    )
    if loc_rows:
        _write_table(
            out / "locality.csv", cfg,
            ("k", "seed", "block_row", "block_col", "db_norm", "da_norm", "intersecting"),
            loc_rows,
        )
    _write_json(out / "outlier_sweep.json", {
        "config": cfg.to_json_dict(),
        "summary": summarize_sweep(cells),
        "version": __version__,
    })
    return EXIT_OK


def _deviation_star(work):
    m, n, rank, k, spec, seed, root_seed, protocol = work
    return deviation_cell(m, n, rank, k, spec, seed, root_seed=root_seed, protocol=protocol)


def _hybrid_cell(work):
    cfg, ratio, seed = work
    g, tc = cfg.geometry, cfg.train
    task = make_task(
        tc.structure, g.m, g.n, seed=_child_seed(cfg.seed, 11, seed),
        noise_std=tc.noise_std, rank=tc.teacher_rank, grid=tc.grid,
    )
    adapter = init_adapter(
        "hybrid", g.m, g.n, cfg.adapter.r, k=cfg.adapter.k,
        alpha=cfg.adapter.alpha, ratio=ratio,
        seed=_child_seed(cfg.seed, 13, seed),
    )
    layer = AdaptedLayer(task.w0, adapter)
    opt = OptimizerState.create(
        cfg.optimizer.kind, adapter, lr=cfg.optimizer.lr,
        beta1=cfg.optimizer.beta1, beta2=cfg.optimizer.beta2,
        weight_decay=cfg.optimizer.weight_decay,
    )
    report = train(
        layer, task, epochs=tc.epochs, batch_size=tc.batch_size,
        steps_per_epoch=tc.steps_per_epoch, optimizer=opt,
    )
    return (ratio, seed, report.final_eval_loss, report.recovery_error, report.diverged)


def cmd_hybrid_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    if cfg.train.structure == "outlier_aligned":
        raise ConfigError("hybrid-sweep supports low_rank and block_heterogeneous tasks")
    work = [
        (cfg, ratio, seed)
        for ratio in sorted(cfg.sweep.ratios)
        for seed in sorted(cfg.sweep.seeds)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_hybrid_cell, work, chunksize=1))
    else:
        rows = [_hybrid_cell(w) for w in work]
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_table(
        out / "hybrid_sweep.csv", cfg,
        ("ratio", "seed", "final_eval_loss", "recovery_error", "diverged"),
        rows,
    )
    by_ratio = {}
    for ratio, _, loss, _, _ in rows:
        by_ratio.setdefault(ratio, []).append(loss)
    _write_json(out / "hybrid_sweep.json", {
        "config": cfg.to_json_dict(),
        "summary": [
            {"ratio": ratio, "mean_final_eval_loss": float(np.mean(losses)),
             "n_seeds": len(losses)}
            for ratio, losses in sorted(by_ratio.items())
        ],
        "version": __version__,
    })
    return EXIT_CHECK_FAILED if any(r[4] for r in rows) else EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gralora",
        description="Granular low-rank adaptation experiments on dense layers.",
    )
    parser.add_argument("--version", action="version", version=f"gralora {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, func):
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of all adapter kinds")
    p.add_argument("--fault-flip-sign", type=str, default=None,
                   help="negate one analytic factor gradient (negative control)")
    common(p, cmd_gradcheck)

    common(sub.add_parser("outlier-sweep", help="deviation and locality under outliers"),
           cmd_outlier_sweep)
    common(sub.add_parser("rank-analysis", help="effective rank over (r, k) cells"),
           cmd_rank_analysis)

    p = sub.add_parser("cost", help="FLOPs/parameter/activation cost report")
    p.add_argument("--dtype-bytes", type=int, default=2,
                   help="bytes per activation element for the byte estimate")
    common(p, cmd_cost)

    common(sub.add_parser("train", help="train one adapter on a synthetic task"), cmd_train)
    common(sub.add_parser("hybrid-sweep", help="train over the hybrid ratio axis"),
           cmd_hybrid_sweep)
    common(sub.add_parser("equivalence", help="sparse-form and rank checks"),
           cmd_equivalence)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        validate_experiment(cfg)
        out = Path(args.out or os.environ.get(ENV_OUT_DIR) or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(cfg, out, args)
    except (ConfigError, ShapeError, MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
