"""Acceptance criteria 1-10.

Criteria 1 and 10 run here. The others read the outputs written by
``scripts/run_experiments.sh`` under ``$COVMON_ACCEPTANCE_OUT`` (default
``runs/`` in the repository root). A missing output is a failure, never a skip.
One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import csv
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import conftest
import golden
from covmon import cams, store
from covmon.config import load_config
from covmon.report import SAFE_ROW, DetectionReport

ROOT = Path(__file__).resolve().parents[1]
OUT = Path(os.environ.get("COVMON_ACCEPTANCE_OUT", ROOT / "runs"))


def record(n, ok, detail):
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def report(ds):
    p = OUT / ds / "report.csv"
    return DetectionReport.from_csv(p.read_text()) if p.exists() else None


# ------------------------------------------------------------------ 1

def test_criterion_01_confidence_closed_forms():
    c = cams.confidence_from_cost([2, 63], 10)
    ok = abs(c[0] - 0.8705) <= 5e-4 and abs(c[1] - 0.0126) <= 5e-4
    # c at eta = tau through each CAM's own cost and confidence path
    rng = np.random.default_rng(7)
    worst, used = 0.0, {}
    for kind, sig in golden.signatures().items():
        act = {t.tap_id: (rng.integers(-16, 33, (40, t.width)) / 8).astype(np.float32) for t in golden.TAPS}
        pred = rng.integers(0, 2, 40)
        eta = cams.coverage_cost(act, sig, pred)
        pos = eta > 0
        got = cams.confidence({t: a[pos] for t, a in act.items()}, sig, pred[pos], eta[pos]).c
        used[kind] = int(pos.sum())
        worst = max(worst, float(np.max(np.abs(got - 0.5))) if pos.any() else math.inf)
    ok = ok and worst <= 1e-12 and min(used.values()) > 0
    record(1, ok, f"c(2,10)={c[0]:.4f} c(63,10)={c[1]:.4f}; max|c(eta=tau)-0.5|={worst:.1e} over "
                  + ", ".join(f"{k} {n}" for k, n in used.items()))


# ------------------------------------------------------------------ 2, 3

GATE = {"mnist": 0.985, "fmnist": 0.89}
TRUSTED = {"mnist": 59309, "fmnist": 52680}


def _model_meta(ds):
    cfg = load_config(ds)
    path = OUT / ds / "artifacts" / f"model-{cfg.model_key}.cvsg"
    return cfg, (store.model_meta(path) if path.exists() else None)


def test_criterion_02_model_quality():
    parts, ok = [], True
    for ds, bound in GATE.items():
        cfg, meta = _model_meta(ds)
        if meta is None:
            ok = False
            parts.append(f"{ds}: no trained model under {OUT / ds}")
            continue
        acc, secs = meta["test_accuracy"], meta.get("train_seconds")
        ok &= acc >= bound and cfg.train.epochs == 8 and (secs is None or secs <= 1800)
        parts.append(f"{ds} acc={acc:.4f} (>= {bound})" + (f" in {secs / 60:.1f} min" if secs else ""))
    record(2, ok, "; ".join(parts))


def test_criterion_03_trusted_set_sizes():
    parts, ok = [], True
    for ds, ref in TRUSTED.items():
        cfg, meta = _model_meta(ds)
        path = OUT / ds / "artifacts" / f"trusted-{cfg.trusted_key}.npz"
        if meta is None or meta["test_accuracy"] < GATE[ds] or not path.exists():
            ok = False
            parts.append(f"{ds}: no trusted set for a gated model")
            continue
        n = len(np.load(path)["train"])
        rel = n / ref - 1
        ok &= abs(rel) <= 0.02
        parts.append(f"{ds} {n} vs {ref} ({rel:+.2%})")
    record(3, ok, "; ".join(parts))


# ------------------------------------------------------------------ 4

def test_criterion_04_memory_footprint():
    path = OUT / "mnist" / "bench_memory.csv"
    if not path.exists():
        record(4, False, f"missing {path}")
    rows = read_rows(path)
    want = {"SRC", "MRC-16", "MRC-32", "NRC", "kNNC"}
    seen = {r["cam"] for r in rows}
    bad, exact = [], True
    for r in rows:
        exact &= int(r["payload_bytes"]) == int(r["analytic_bytes"])
        if r["relative_error"] and abs(float(r["relative_error"])) > 0.15:
            bad.append(f"{r['cam']} tap{r['tap']} {float(r['relative_error']):+.1%}")
    ok = want <= seen and exact and not bad
    detail = f"analytic equality {'holds' if exact else 'FAILS'}; "
    detail += ("outside 15%: " + ", ".join(bad)) if bad else "all taps within 15%"
    if not want <= seen:
        detail += f"; missing {sorted(want - seen)}"
    record(4, ok, detail)


# ------------------------------------------------------------------ 5, 6

def test_criterion_05_out_of_distribution():
    parts, ok = [], True
    for ds in ("mnist", "fmnist"):
        rep = report(ds)
        if rep is None:
            ok = False
            parts.append(f"{ds}: no report")
            continue
        row = "Out of Dis."
        for col in rep.columns:
            acc = rep.accuracy(row, col)
            if col.startswith(("SRC", "MRC")):
                ok &= acc >= 0.99
            elif col in ("VisionGuard", "FeatureSqueezing"):
                ok &= acc <= 0.10
            else:
                continue
            parts.append(f"{ds} {col}={acc:.3f}")
    record(5, ok, "; ".join(parts))


def test_criterion_06_detection_bands():
    checks = [("mnist", "FGSM-2", "SRC", 0.93), ("mnist", SAFE_ROW, "SRC", 0.92), ("fmnist", "CW", "kNNC", 0.84)]
    parts, ok = [], True
    for ds, row, col, bound in checks:
        rep = report(ds)
        if rep is None or (row, col) not in rep.counts:
            ok = False
            parts.append(f"{ds} {col}/{row}: missing")
            continue
        acc = rep.accuracy(row, col)
        ok &= acc >= bound
        parts.append(f"{ds} {col}/{row}={acc:.3f} (>= {bound})")
    record(6, ok, "; ".join(parts))


# ------------------------------------------------------------------ 7

def test_criterion_07_latency_ordering():
    path = OUT / "mnist" / "bench_latency.csv"
    if not path.exists():
        record(7, False, f"missing {path}")
    ov = {(r["cam"], r["taps"]): float(r["overhead_pct"]) for r in read_rows(path)}
    full = "{1,2,3}"
    try:
        s, m16, m32, k = (ov[c, full] for c in ("SRC", "MRC-16", "MRC-32", "kNNC"))
        k3 = ov["kNNC", "{3}"]
    except KeyError as exc:
        record(7, False, f"missing latency row {exc}")
    ok = s < m16 <= m32 < k and k >= 2 * k3
    record(7, ok, f"overhead % at {full}: SRC {s:.0f} < MRC-16 {m16:.0f} <= MRC-32 {m32:.0f} < kNNC {k:.0f}; "
                  f"kNNC {{3}} {k3:.0f} ({k / k3:.1f}x)")


# ------------------------------------------------------------------ 8

def test_criterion_08_epsilon_sweep():
    path = OUT / "mnist" / "sweep.csv"
    if not path.exists():
        record(8, False, f"missing {path}")
    rows = sorted(read_rows(path), key=lambda r: float(r["eps"]))
    eta = np.array([float(r["mean_cost"]) for r in rows])
    conf = np.array([float(r["mean_confidence"]) for r in rows])
    eps = [float(r["eps"]) for r in rows]
    ok = (eps[0] == 0 and eps[-1] == 0.35 and np.all(np.diff(eta) >= 0) and np.all(np.diff(conf) <= 0)
          and eta[-1] > 10 * eta[0] and eta[-1] > eta[0])
    ratio = eta[-1] / eta[0] if eta[0] > 0 else math.inf
    record(8, ok, f"mean cost {eta[0]:.1f} -> {eta[-1]:.1f} ({ratio:.1f}x), confidence {conf[0]:.3f} -> {conf[-1]:.3f}, "
                  f"monotone: cost {bool(np.all(np.diff(eta) >= 0))}, confidence {bool(np.all(np.diff(conf) <= 0))}")


# ------------------------------------------------------------------ 9

def test_criterion_09_adaptive_round_trip():
    b, a = OUT / "mnist" / "adaptive_before.csv", OUT / "mnist" / "adaptive_after.csv"
    if not (b.exists() and a.exists()):
        record(9, False, f"missing {b} or {a}")
    before, after = DetectionReport.from_csv(b.read_text()), DetectionReport.from_csv(a.read_text())
    g0, g5 = "Signature-Attack (gamma=0.0)", "Signature-Attack (gamma=0.5)"
    d0, d5 = before.accuracy(g0, "SRC"), before.accuracy(g5, "SRC")
    r5 = after.accuracy(g5, "SRC")
    safe_shift = after.accuracy(SAFE_ROW, "SRC") - before.accuracy(SAFE_ROW, "SRC")
    drop, recovered = d0 - d5, r5 - d5
    ok = drop >= 0.1 and recovered >= drop / 2 and abs(safe_shift) <= 0.06
    record(9, ok, f"SRC gamma=0 {d0:.3f} -> gamma=0.5 {d5:.3f} (drop {drop:.3f}); recalibrated {r5:.3f} "
                  f"(recovers {recovered:.3f}); safe shift {safe_shift:+.3f}")


# ------------------------------------------------------------------ 10

PROPERTY_SUITES = [
    "tests/test_cams.py::test_merge_associative_commutative",
    "tests/test_cams.py::test_minibatch_equals_single_pass",
    "tests/test_cams.py::test_generic_merge_reduces_many_batches",
    "tests/test_cams.py::test_src_trusted_member_invariant",
    "tests/test_cams.py::test_src_trusted_member_invariant_on_network",
    "tests/test_cams.py::test_knn_search_matches_bruteforce",
    "tests/test_nn.py::test_cross_entropy_gradient_finite_differences",
    "tests/test_nn.py::test_signature_loss_gradient_finite_differences",
    "tests/test_store.py::test_round_trip_random",
    "tests/test_store.py::test_golden_fixture_reads_back",
    "tests/test_calibrate.py::test_roc_matches_exhaustive_oracle",
    "tests/test_calibrate.py::test_selection_matches_argmax_oracle",
]


@pytest.mark.skipif(os.environ.get("COVMON_ACCEPTANCE_INNER") == "1", reason="already inside the property run")
def test_criterion_10_property_suites():
    env = dict(os.environ, COVMON_ACCEPTANCE_INNER="1")
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
                          cwd=ROOT, env=env, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    record(10, proc.returncode == 0, f"{len(PROPERTY_SUITES)} property suites: {tail}")
