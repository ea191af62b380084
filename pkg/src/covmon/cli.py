"""Command-line entry point: ``covmon <subcommand>``.

Each subcommand runs the pipeline up to its stage (earlier stages come from
the artifact cache when present) and writes CSV plus an aligned text table to
``--out``. Exit status is 0 on success and a per-stage code otherwise (see
``pipeline.EXIT_CODES``). The dataset cache directory is taken from
``$COVMON_CACHE`` (default ``~/.cache/covmon``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import bench, cams, store
from .config import load_config
from .pipeline import EXIT_CODES, Pipeline, StageError
from .report import records_to_csv, records_to_text

log = logging.getLogger("covmon")


def _emit(out: Path, name: str, csv_text: str, table: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.csv").write_text(csv_text)
    (out / f"{name}.txt").write_text(table)
    print(table, end="")


def _cams(args, p):
    return [cams.CamSpec.parse(c) for c in args.cam] if args.cam else list(p.cfg.cams)


def _taps(args):
    return tuple(int(t) for t in args.taps.split(",")) if getattr(args, "taps", None) else None


def cmd_fetch(p, args):
    train, test = p.splits()
    print(f"{p.cfg.dataset}: train {len(train)}, test {len(test)}")


def cmd_train(p, args):
    p.model()
    print(f"model {p.model_path.name}: test accuracy {p.test_accuracy():.4f}")


def cmd_trusted(p, args):
    ts, tt = p.trusted()
    rows = [{"set": "trusted", "samples": len(ts)}, {"set": "trusted test", "samples": len(tt)}]
    rows += [{"set": f"trusted class {c}", "samples": len(ix)} for c, ix in ts.partitions.items()]
    _emit(p.out, "trusted", records_to_csv(rows, ["set", "samples"]), records_to_text(rows, ["set", "samples"]))


def cmd_sign(p, args):
    rows = []
    for cam in _cams(args, p):
        p.signature(cam, _taps(args))
        path = p.signature_path(cam, _taps(args))
        for tap, n in store.tap_payloads(path).items():
            rows.append({"cam": cam.label, "tap": tap, "payload_bytes": n, "file": path.name})
    f = ["cam", "tap", "payload_bytes", "file"]
    _emit(p.out, "signatures", records_to_csv(rows, f), records_to_text(rows, f))


def cmd_calibrate(p, args):
    tdir = p.out / "thresholds"
    tdir.mkdir(parents=True, exist_ok=True)
    for cam in _cams(args, p):
        th = p.thresholds(cam, _taps(args))
        (tdir / f"{cam.label}.txt").write_text(th.to_text())
        print(th.to_text(), end="")


def cmd_attack(p, args):
    rows = []
    for entry in p.cfg.attacks:
        if args.name and entry.name not in args.name:
            continue
        us = p.unsafe_set(entry)
        adv = p.adversarial(entry)
        rows.append({"attack": entry.name, "method": entry.attack.method, "accepted": len(adv),
                     "attempted": adv.meta.get("attempted", ""), "calibration": us.n_cal, "evaluation": us.n_eval})
    f = ["attack", "method", "accepted", "attempted", "calibration", "evaluation"]
    _emit(p.out, "attacks", records_to_csv(rows, f), records_to_text(rows, f))


def cmd_evaluate(p, args):
    taps = _taps(args)
    rep = p.run(taps)
    suffix = "" if taps is None else "-taps" + "".join(map(str, taps))
    _emit(p.out, "report" + suffix, rep.to_csv(), rep.to_text())


def cmd_bench(p, args):
    if not args.memory_only:
        rows = bench.bench_latency(p, _cams(args, p) if args.cam else None, inferences=args.inferences)
        f = ["cam", "taps", "mean_us", "median_us", "p95_us", "overhead_pct", "inferences"]
        _emit(p.out, "bench_latency", records_to_csv(rows, f), records_to_text(rows, f))
    rows = bench.bench_memory(p, _cams(args, p) if args.cam else None)
    f = ["cam", "tap", "payload_bytes", "analytic_bytes", "reference_bytes", "relative_error", "file_bytes"]
    _emit(p.out, "bench_memory", records_to_csv(rows, f), records_to_text(rows, f))


def cmd_sweep(p, args):
    rows = p.epsilon_sweep()
    f = ["eps", "mean_cost", "mean_confidence", "ae_fraction", "samples"]
    _emit(p.out, "sweep", records_to_csv(rows, f), records_to_text(rows, f))


def cmd_adaptive(p, args):
    before, after, thresholds = p.adaptive_roundtrip()
    _emit(p.out, "adaptive_before", before.to_csv(), before.to_text())
    _emit(p.out, "adaptive_after", after.to_csv(), after.to_text())
    tdir = p.out / "thresholds"
    tdir.mkdir(parents=True, exist_ok=True)
    for label, th in thresholds.items():
        (tdir / f"{label}-recalibrated.txt").write_text(th.to_text())


COMMANDS = {"fetch": cmd_fetch, "train": cmd_train, "trusted": cmd_trusted, "sign": cmd_sign,
            "calibrate": cmd_calibrate, "attack": cmd_attack, "evaluate": cmd_evaluate, "bench": cmd_bench,
            "sweep": cmd_sweep, "adaptive": cmd_adaptive}


def build_parser():
    ap = argparse.ArgumentParser(prog="covmon", description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="mnist", help="INI file or bundled name (mnist, fmnist)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--workers", type=int, default=1, help="processes for attack generation")
    ap.add_argument("--out", default="covmon-out", help="output and artifact directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name in ("sign", "calibrate", "bench"):
            sp.add_argument("--cam", action="append", help="e.g. src, mrc-32, knnc (repeatable)")
        if name in ("sign", "calibrate", "evaluate"):
            sp.add_argument("--taps", help="tap subset, e.g. 1,2,3")
        if name == "attack":
            sp.add_argument("--name", action="append", help="attack row label (repeatable)")
        if name == "bench":
            sp.add_argument("--inferences", type=int)
            sp.add_argument("--memory-only", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (OSError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    p = Pipeline(cfg, args.out, workers=args.workers)
    try:
        COMMANDS[args.command](p, args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
