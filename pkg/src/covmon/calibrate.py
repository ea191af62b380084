"""Per-class threshold calibration from ROC analysis.

A detector flags an input unsafe when its confidence drops below 0.5. For the
cost-style methods that is ``eta > tau``; for NRC (a safety score) it is
``eta < tau``; for the baseline detectors (divergence scores) ``J >= tau``.
Candidate thresholds are the observed scores themselves, so the ROC curve is
exact. The operating point maximises Youden's J = TPR - FPR, compared on
integer counts so ties are exact; ties go to the smaller FPR, then the
smaller threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cams import COST, SAFETY

log = logging.getLogger(__name__)

DIVERGENCE = "divergence"


class OneSidedError(ValueError):
    def __init__(self, cls, n_safe, n_unsafe):
        super().__init__(f"class {cls}: need safe and unsafe items, have {n_safe} safe / {n_unsafe} unsafe")
        self.cls = cls


@dataclass
class CalibrationSet:
    eta: np.ndarray  # coverage cost (or score) per item
    pred: np.ndarray  # predicted class per item
    unsafe: np.ndarray  # ground truth: True for adversarial / OOD items

    def __post_init__(self):
        self.eta = np.asarray(self.eta, np.float64)
        self.pred = np.asarray(self.pred, np.int64)
        self.unsafe = np.asarray(self.unsafe, bool)

    @classmethod
    def from_parts(cls, safe_eta, safe_pred, unsafe_eta, unsafe_pred):
        return cls(np.concatenate([safe_eta, unsafe_eta]),
                   np.concatenate([safe_pred, unsafe_pred]),
                   np.r_[np.zeros(len(safe_eta), bool), np.ones(len(unsafe_eta), bool)])

    def augmented(self, unsafe_eta, unsafe_pred) -> "CalibrationSet":
        return CalibrationSet(np.concatenate([self.eta, np.asarray(unsafe_eta, np.float64)]),
                              np.concatenate([self.pred, np.asarray(unsafe_pred, np.int64)]),
                              np.concatenate([self.unsafe, np.ones(len(unsafe_eta), bool)]))

    def select(self, cls=None):
        if cls is None:
            return self.eta, self.unsafe
        m = self.pred == cls
        return self.eta[m], self.unsafe[m]


@dataclass
class RocCurve:
    tau: np.ndarray
    fp: np.ndarray
    tp: np.ndarray
    n_safe: int
    n_unsafe: int
    sense: str = COST

    @property
    def fpr(self):
        return self.fp / self.n_safe

    @property
    def tpr(self):
        return self.tp / self.n_unsafe

    def __len__(self):
        return len(self.tau)


def _zero_plus(values):
    pos = values[values > 0]
    return float(pos.min()) / 2 if len(pos) else 1.0


def flag_unsafe(eta, tau, sense=COST):
    eta = np.asarray(eta, np.float64)
    if sense == COST:
        return eta > tau
    if sense == SAFETY:
        return eta < tau
    return eta >= tau


def candidate_thresholds(eta, sense=COST):
    distinct = np.unique(np.asarray(eta, np.float64))
    if sense == DIVERGENCE:
        return np.r_[distinct, np.inf]
    return np.r_[_zero_plus(distinct), distinct[distinct > 0], np.inf]


def roc_from_scores(eta, unsafe, sense=COST, cls=None) -> RocCurve:
    eta = np.asarray(eta, np.float64)
    unsafe = np.asarray(unsafe, bool)
    n_unsafe = int(unsafe.sum())
    n_safe = len(eta) - n_unsafe
    if n_safe == 0 or n_unsafe == 0:
        raise OneSidedError(cls, n_safe, n_unsafe)
    taus = candidate_thresholds(eta, sense)
    safe_sorted = np.sort(eta[~unsafe])
    unsafe_sorted = np.sort(eta[unsafe])

    def flagged(sorted_vals):
        if sense == COST:
            return len(sorted_vals) - np.searchsorted(sorted_vals, taus, side="right")
        if sense == SAFETY:
            return np.searchsorted(sorted_vals, taus, side="left")
        return len(sorted_vals) - np.searchsorted(sorted_vals, taus, side="left")

    fp, tp = flagged(safe_sorted), flagged(unsafe_sorted)
    keep = np.r_[True, (np.diff(fp) != 0) | (np.diff(tp) != 0)]
    return RocCurve(taus[keep], fp[keep].astype(np.int64), tp[keep].astype(np.int64), n_safe, n_unsafe, sense)


def roc_curve(cal: CalibrationSet, cls=None, sense=COST) -> RocCurve:
    """ROC over the items predicted as ``cls`` (all items when ``cls`` is None)."""
    eta, unsafe = cal.select(cls)
    return roc_from_scores(eta, unsafe, sense, cls)


def youden_index(curve: RocCurve, i: int) -> float:
    return float(curve.tpr[i] - curve.fpr[i])


def select_index(curve: RocCurve) -> int:
    if len(curve) == 0:
        raise ValueError("empty ROC curve")
    # J * n_safe * n_unsafe, exact in integers
    score = curve.tp * curve.n_safe - curve.fp * curve.n_unsafe
    return int(np.lexsort((curve.tau, curve.fp, -score))[0])


def select_threshold(curve: RocCurve) -> float:
    return float(curve.tau[select_index(curve)])


@dataclass
class ThresholdSet:
    tau: np.ndarray  # (m,) per-class threshold
    cam: str
    fingerprint: str
    sense: str = COST
    youden: np.ndarray = None
    fallback: np.ndarray = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, np.float64)
        m = len(self.tau)
        self.youden = np.full(m, np.nan) if self.youden is None else np.asarray(self.youden, np.float64)
        self.fallback = np.zeros(m, bool) if self.fallback is None else np.asarray(self.fallback, bool)
        if np.any(self.tau <= 0):
            raise ValueError("thresholds must be positive")

    def __getitem__(self, cls):
        return self.tau[cls]

    def same_as(self, other: "ThresholdSet") -> bool:
        return (self.cam == other.cam and self.fingerprint == other.fingerprint and self.sense == other.sense
                and np.array_equal(self.tau, other.tau) and np.array_equal(self.fallback, other.fallback))

    def to_text(self) -> str:
        lines = [f"# cam={self.cam} sense={self.sense} fingerprint={self.fingerprint}", "class,tau,youden,fallback"]
        for i, (t, j, f) in enumerate(zip(self.tau, self.youden, self.fallback)):
            lines.append(f"{i},{float(t)!r},{float(j)!r},{int(f)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ThresholdSet":
        head, _, *rows = text.strip().splitlines()
        meta = dict(kv.split("=", 1) for kv in head.lstrip("# ").split())
        vals = [r.split(",") for r in rows]
        return cls(np.array([float(v[1]) for v in vals]), meta["cam"], meta["fingerprint"], meta["sense"],
                   np.array([float(v[2]) for v in vals]), np.array([v[3] == "1" for v in vals]))


def _fallback(eta, unsafe, sense):
    safe_eta, unsafe_eta = eta[~unsafe], eta[unsafe]
    if len(safe_eta) and not len(unsafe_eta):
        if sense == COST:
            return float(safe_eta.max()) + 1.0
        pos = safe_eta[safe_eta > 0]
        return float(pos.min()) if len(pos) else 1.0
    if len(unsafe_eta):
        return _zero_plus(unsafe_eta) if sense == COST else np.inf
    return 1.0


def calibrate_all_classes(cal: CalibrationSet, class_count: int, cam: str = "", sense=COST,
                          fingerprint: str = "") -> ThresholdSet:
    """ROC + Youden per class; one-sided classes fall back with a warning.

    Fallbacks: only safe items -> accept them all (cost: max safe eta + 1);
    only unsafe items -> reject them all; no items -> tau = 1.
    """
    tau = np.ones(class_count)
    youden = np.full(class_count, np.nan)
    fallback = np.zeros(class_count, bool)
    warnings = []
    for i in range(class_count):
        eta, unsafe = cal.select(i)
        try:
            curve = roc_from_scores(eta, unsafe, sense, i)
        except OneSidedError as exc:
            tau[i] = _fallback(eta, unsafe, sense)
            fallback[i] = True
            warnings.append(f"{exc}; fallback tau={float(tau[i])!r}")
            log.warning(warnings[-1])
            continue
        k = select_index(curve)
        tau[i] = curve.tau[k]
        youden[i] = youden_index(curve, k)
    return ThresholdSet(tau, cam, fingerprint, sense, youden, fallback, warnings)


def recalibrate_with_adaptive(cal: CalibrationSet, adaptive_eta, adaptive_pred, class_count, cam="",
                              sense=COST, fingerprint="") -> ThresholdSet:
    """Re-run calibration after adding adaptive-attack samples as unsafe items."""
    return calibrate_all_classes(cal.augmented(adaptive_eta, adaptive_pred), class_count, cam, sense, fingerprint)


def calibrate_global(scores, unsafe, sense=DIVERGENCE) -> tuple[float, float]:
    """Single threshold for a class-agnostic detector; returns (tau, youden J)."""
    curve = roc_from_scores(scores, unsafe, sense)
    k = select_index(curve)
    return float(curve.tau[k]), youden_index(curve, k)
