"""Latency and memory-footprint benchmarks."""

from __future__ import annotations

import dataclasses
import gc
import time

import numpy as np
import torch

from . import cams, nn, store

REFERENCE_KB = {  # per-tap signature size reported for LeNet-4 on MNIST, kB
    "SRC": (944.0, 278.0, 62.8),
    "MRC-16": (8300.0, 2300.0, 387.0),
    "MRC-32": (15700.0, 4400.0, 707.0),
    "NRC": (483.6, 150.8, 42.8),
    "kNNC": (2.6e6, 732e3, 114e3),
}


def restrict(sig, taps):
    """View of a signature on a subset of its taps (arrays are shared)."""
    keep = tuple(t for t in sig.taps if t.tap_id in set(taps))
    if len(keep) != len(set(taps)):
        raise KeyError(f"signature lacks taps {sorted(set(taps) - {t.tap_id for t in sig.taps})}")
    fields = {"taps": keep}
    for name in ("vmin", "vmax", "lam", "rows"):
        if hasattr(sig, name):
            fields[name] = {t.tap_id: getattr(sig, name)[t.tap_id] for t in keep}
    out = dataclasses.replace(sig, **fields)
    if hasattr(sig, "_norms"):
        out._norms = sig._norms
    return out


def _time_pair(fn, ref, xs, warmup, n):
    """Time ``fn`` and ``ref`` on alternating inferences so both see the same drift."""
    for i in range(warmup):
        fn(xs[i % len(xs)])
        ref(xs[i % len(xs)])
    out = np.empty((2, n))
    enabled = gc.isenabled()
    gc.disable()
    try:
        _pair_loop(fn, ref, xs, n, out)
    finally:
        if enabled:
            gc.enable()
    return out[0] / 1e3, out[1] / 1e3  # microseconds


def _pair_loop(fn, ref, xs, n, out):
    for i in range(n):
        x = xs[i % len(xs)]
        order = (0, 1) if i % 2 == 0 else (1, 0)
        for j in order:
            f = fn if j == 0 else ref
            t0 = time.perf_counter_ns()
            f(x)
            out[j, i] = time.perf_counter_ns() - t0


def monitored_inference(model, sig, taps, tau):
    def run(x):
        res = nn.forward(model, x, taps)
        if sig is None:
            return res.predicted
        return cams.confidence(res.taps, sig, res.predicted, tau[res.predicted])
    return run


def bench_latency(pipeline, cam_list=None, installations=None, inferences=None, warmup=None) -> list[dict]:
    """Per CAM x installation: mean / median / p95 latency and overhead versus bare inference.

    Everything runs single-threaded in one process with the garbage collector
    paused. Every monitored inference is paired with a bare one; all bare
    timings are pooled into the "bare" row. A row's overhead is the median of
    its paired differences over the median paired bare time; medians because
    scheduler stalls put a heavy tail on single-image timings.
    """
    cfg = pipeline.cfg.bench
    cam_list = cam_list or cfg.cams
    installations = installations or cfg.installations
    n = inferences or cfg.inferences
    warmup = cfg.warmup if warmup is None else warmup
    torch.set_num_threads(1)
    model = pipeline.model()
    _, tt = pipeline.trusted()
    xs = tt.images[:max(n, 1)]
    bare = monitored_inference(model, None, (), None)
    # "none" times bare against bare: its overhead is the noise band
    t, b = _time_pair(bare, bare, xs, warmup, n)
    timed, pooled = [("none", (), t, b)], [b]
    for cam in cam_list:
        full = pipeline.signature(cam, tuple(sorted({t for inst in installations for t in inst})))
        tau = np.ones(full.class_count)
        for taps in installations:
            sig = restrict(full, taps)
            if cam.kind == "knnc":
                for tid in taps:
                    sig.norms(tid)
            n_cam = min(n, cfg.knnc_inferences) if cam.kind == "knnc" else n
            t, b = _time_pair(monitored_inference(model, sig, taps, tau), bare, xs, min(warmup, n_cam), n_cam)
            timed.append((cam.label, taps, t, b))
            pooled.append(b)
    base = np.concatenate(pooled)
    return [_row("bare", (), base, base)] + [_row(*r) for r in timed]


def _row(label, taps, t, paired):
    # median paired difference: each pair ran back to back, so machine drift cancels
    over = float(np.median(t - paired) / np.median(paired) * 100)
    return {"cam": label, "taps": "{" + ",".join(map(str, taps)) + "}", "mean_us": float(t.mean()),
            "median_us": float(np.median(t)), "p95_us": float(np.percentile(t, 95)), "overhead_pct": over,
            "inferences": len(t)}


def bench_memory(pipeline, cam_list=None) -> list[dict]:
    """Measured per-tap payload bytes against the analytic size and the reference table."""
    cam_list = cam_list or pipeline.cfg.bench.cams
    rows = []
    for cam in cam_list:
        sig = pipeline.signature(cam)
        path = pipeline.signature_path(cam)
        measured = store.tap_payloads(path)
        file_bytes = path.stat().st_size
        ref = REFERENCE_KB.get(cam.label)
        for t in sig.taps:
            analytic = store.tap_payload_bytes(cam.kind, t.width, sig.class_count, getattr(sig, "Q", 0),
                                               int(sig.counts.sum()))
            rec = {"cam": cam.label, "tap": t.tap_id, "payload_bytes": measured[t.tap_id],
                   "analytic_bytes": analytic, "file_bytes": file_bytes}
            if ref and t.tap_id <= len(ref):
                rec["reference_bytes"] = ref[t.tap_id - 1] * 1000
                rec["relative_error"] = measured[t.tap_id] / rec["reference_bytes"] - 1
            rows.append(rec)
    return rows
