"""Command-line contract: exit codes, artifacts, determinism, output routing."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from gralora import __version__
from gralora.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK, main

FAST_GRADCHECK = {
    "gradcheck": {"m": 8, "n": 8, "t": 4, "r": 4, "k": 2},
    "adapter": {"kind": "gralora", "r": 4, "k": 2},
    "geometry": {"m": 8, "n": 8, "t": 4},
    "outlier": {"channels": [3], "magnitude_ratio": 100.0},
}

FAST_SWEEP = {
    "geometry": {"m": 16, "n": 16, "t": 8},
    "adapter": {"kind": "gralora", "r": 4, "k": 2},
    "outlier": {"channels": [5], "magnitude_ratio": 100.0},
    "sweep": {"ranks": [2, 4], "k_values": [1, 2], "seeds": 3},
    "protocol": {"t": 8, "train_steps": 2, "measure_batches": 2},
}

FAST_TRAIN = {
    "seed": 2,
    "geometry": {"m": 16, "n": 16, "t": 16},
    "adapter": {"kind": "gralora", "r": 4, "k": 2},
    "outlier": {"channels": [5], "magnitude_ratio": 100.0},
    "optimizer": {"kind": "sgd", "lr": 0.05},
    "train": {"structure": "low_rank", "teacher_rank": 2, "epochs": 3,
              "batch_size": 8, "steps_per_epoch": 5},
    "sweep": {"ranks": [4], "k_values": [2], "ratios": [0.0, 1.0], "seeds": 2},
}


def write_cfg(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_gradcheck_passes_and_writes_report(tmp_path):
    cfg = write_cfg(tmp_path, FAST_GRADCHECK)
    code = main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "o" / "gradcheck.json").read_text())
    assert doc["passed"] is True
    assert set(doc["reports"]) == {"lora", "gralora", "hybrid"}
    assert doc["config"]["gradcheck"]["m"] == 8


def test_gradcheck_fault_injection_fails(tmp_path):
    cfg = write_cfg(tmp_path, FAST_GRADCHECK)
    code = main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--fault-flip-sign", "a"])
    assert code == EXIT_CHECK_FAILED
    doc = json.loads((tmp_path / "o" / "gradcheck.json").read_text())
    assert doc["passed"] is False


def test_unknown_fault_factor_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, FAST_GRADCHECK)
    code = main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--fault-flip-sign", "zz"])
    assert code == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_bad_config_key_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"geometry": {"m": 8, "n": 8}, "typo": 1})
    assert main(["cost", "--config", cfg]) == EXIT_CONFIG
    assert "unknown config key" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["cost", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    capsys.readouterr()


def test_divisibility_violation_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {
        "geometry": {"m": 100, "n": 100},
        "adapter": {"kind": "gralora", "r": 32, "k": 3},
        "outlier": {"channels": [5]},
    })
    assert main(["equivalence", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_sweep_csv_shape_and_header(tmp_path):
    cfg = write_cfg(tmp_path, FAST_SWEEP)
    out = tmp_path / "o"
    assert main(["outlier-sweep", "--config", cfg, "--out", str(out)]) == EXIT_OK
    lines = (out / "deviation.csv").read_text().splitlines()
    assert lines[0].startswith(f"# gralora {__version__} config=")
    assert lines[1] == "method,rank,k,seed,cosine_distance,frobenius_gap"
    # 2 ranks x 2 k x 3 seeds
    assert len(lines) == 2 + 12
    assert (out / "locality.csv").exists()
    summary = json.loads((out / "outlier_sweep.json").read_text())["summary"]
    assert {(row["rank"], row["k"]) for row in summary} == {(2, 1), (2, 2), (4, 1), (4, 2)}


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, FAST_SWEEP)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["outlier-sweep", "--config", cfg, "--out", str(out)]) == EXIT_OK
        outs.append(out)
    for fname in ("deviation.csv", "locality.csv", "outlier_sweep.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_parallel_jobs_match_serial(tmp_path):
    cfg = write_cfg(tmp_path, FAST_SWEEP)
    a, b = tmp_path / "serial", tmp_path / "par"
    assert main(["outlier-sweep", "--config", cfg, "--out", str(a), "--jobs", "1"]) == EXIT_OK
    assert main(["outlier-sweep", "--config", cfg, "--out", str(b), "--jobs", "2"]) == EXIT_OK
    assert (a / "deviation.csv").read_bytes() == (b / "deviation.csv").read_bytes()


def test_seed_override_changes_cells(tmp_path):
    cfg = write_cfg(tmp_path, FAST_SWEEP)
    a, b = tmp_path / "s0", tmp_path / "s1"
    main(["outlier-sweep", "--config", cfg, "--out", str(a)])
    main(["outlier-sweep", "--config", cfg, "--out", str(b), "--seed", "99"])
    assert (a / "deviation.csv").read_bytes() != (b / "deviation.csv").read_bytes()


def test_env_out_dir_and_flag_priority(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, FAST_GRADCHECK)
    env_dir = tmp_path / "env_out"
    monkeypatch.setenv("GRALORA_OUT", str(env_dir))
    assert main(["cost", "--config", cfg]) == EXIT_OK
    assert (env_dir / "cost.json").exists()
    flag_dir = tmp_path / "flag_out"
    assert main(["cost", "--config", cfg, "--out", str(flag_dir)]) == EXIT_OK
    assert (flag_dir / "cost.json").exists()


def test_train_writes_losses_and_report(tmp_path):
    cfg = write_cfg(tmp_path, FAST_TRAIN)
    out = tmp_path / "o"
    assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "train_report.json").read_text())["report"]
    assert len(report["epoch_losses"]) == 3
    assert report["diverged"] is False
    lines = (out / "train_losses.csv").read_text().splitlines()
    assert len(lines) == 2 + 3


def test_hybrid_sweep_rows(tmp_path):
    cfg = write_cfg(tmp_path, FAST_TRAIN)
    out = tmp_path / "o"
    assert main(["hybrid-sweep", "--config", cfg, "--out", str(out)]) == EXIT_OK
    lines = (out / "hybrid_sweep.csv").read_text().splitlines()
    # 2 ratios x 2 seeds
    assert len(lines) == 2 + 4
    summary = json.loads((out / "hybrid_sweep.json").read_text())["summary"]
    assert [row["ratio"] for row in summary] == [0.0, 1.0]


def test_equivalence_passes(tmp_path):
    cfg = write_cfg(tmp_path, FAST_SWEEP)
    out = tmp_path / "o"
    assert main(["equivalence", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "equivalence.json").read_text())
    assert doc["passed"] is True
    assert all(c["ok"] for c in doc["cells"])


def test_rank_analysis_csv(tmp_path):
    cfg = write_cfg(tmp_path, FAST_SWEEP)
    out = tmp_path / "o"
    assert main(["rank-analysis", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "rank_analysis.json").read_text())
    assert doc["all_match"] is True


def test_cost_report_fields(tmp_path):
    cfg = write_cfg(tmp_path, FAST_TRAIN)
    out = tmp_path / "o"
    assert main(["cost", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "cost.json").read_text())
    assert doc["recommended_k"] >= 1
    assert doc["report"]["flops"] > 0


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "gralora.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert __version__ in proc.stdout
