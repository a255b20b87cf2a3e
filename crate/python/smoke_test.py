#!/usr/bin/env python3
"""Smoke test for the strep_py extension module.

Builds nothing itself: it locates the compiled cdylib under target/, copies
it next to a temp directory under the importable name, and drives the main
entry points end to end on a tiny synthetic dataset.

Usage:
    cargo build --release -p strep-py
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def locate_cdylib() -> Path:
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libstrep_py.so", "strep_py.dll", "libstrep_py.dylib")
    ]
    for path in candidates:
        if path.exists():
            return path
    sys.exit(
        "strep_py cdylib not found; run `cargo build --release -p strep-py` first"
    )


CHECKS = []


def check(name, ok, detail=""):
    CHECKS.append(ok)
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f": {detail}" if detail else ""))


def main():
    workdir = Path(tempfile.mkdtemp(prefix="strep-smoke-"))
    lib = locate_cdylib()
    shutil.copy(lib, workdir / "strep_py.so")
    sys.path.insert(0, str(workdir))
    import strep_py

    # Numeric primitives.
    g = strep_py.gelu([0.0, 1.0, -10.0])
    check(
        "gelu reference points",
        g[0] == 0.0 and abs(g[1] - 0.841345) < 1e-5 and abs(g[2]) < 1e-8,
        f"gelu(1) = {g[1]:.6f}",
    )
    check(
        "huber branches",
        abs(strep_py.huber([0.5], [0.0], 1.0) - 0.125) < 1e-12
        and abs(strep_py.huber([2.0], [0.0], 1.0) - 1.5) < 1e-12,
    )
    w = strep_py.ridge_fit([[1.0], [2.0]], [[2.0], [4.0]], 0.0)
    check(
        "ridge exact interpolation",
        abs(w[0][0] - 2.0) < 1e-8 and abs(w[1][0]) < 1e-8,
        f"weight {w[0][0]:.6f}, bias {w[1][0]:.2e}",
    )

    # Tiny dataset pipeline.
    data = workdir / "tiny.strp"
    stats = strep_py.generate(
        data, nodes=8, days=4, steps_per_day=48, seed=11
    )
    check(
        "generate stats",
        stats["nodes"] == 8
        and stats["steps"] == 4 * 48
        and stats["cv_percent"] > 0.0
        and 0.0 <= stats["seasonality_strength"] <= 1.0,
        f"cv = {stats['cv_percent']:.1f}%, seasonality = {stats['seasonality_strength']:.3f}",
    )
    stats2 = strep_py.dataset_stats(data)
    check("stats roundtrip", stats2 == stats)

    ckpt = workdir / "tiny.ckpt"
    history = strep_py.pretrain_model(
        data,
        ckpt,
        max_epochs=2,
        batch_size=8,
        patience=2,
        dim=16,
        layers=2,
        heads=2,
        proxy_tokens=2,
        seed=5,
    )
    check(
        "pretraining descends",
        len(history) == 2 and history[1]["total"] < history[0]["total"],
        f"epoch losses {history[0]['total']:.4f} -> {history[1]['total']:.4f}",
    )
    check(ckpt.name + " written", ckpt.exists())

    enc = strep_py.encode(ckpt, data, split="test")
    # test split holds ceil(0.2 * 192) = 39 steps; windows = 39 - 12 + 1.
    check(
        "encode window arithmetic",
        enc["windows"] == 39 - 12 + 1 and enc["nodes"] == 8 and enc["dim"] == 16,
        f"{enc['windows']} windows x {enc['nodes']} nodes x {enc['dim']} dims",
    )
    check(
        "representations finite",
        all(math.isfinite(v) for v in enc["rows"][:1000]),
    )

    rows = strep_py.evaluate(
        ckpt, data, horizons=[12], fraction=0.2, repeats=2, seed=5
    )
    methods = {r["method"] for r in rows}
    check(
        "evaluate reports all methods",
        methods == {"RepRidge", "HL", "RidgeRaw"},
        ", ".join(f"{r['method']} mse {r['mse']:.4f}" for r in rows),
    )
    check("metrics finite", all(math.isfinite(r["mse"]) for r in rows))

    shutil.rmtree(workdir, ignore_errors=True)
    if not all(CHECKS):
        sys.exit(1)
    print(f"all {len(CHECKS)} smoke checks passed")


if __name__ == "__main__":
    main()
