"""Coverage analysis methods: signature aggregation and confidence evaluation.

Four methods are provided:

* ``src``  - per-neuron [min, max] range; cost = number of neurons out of range.
* ``mrc``  - the range split into Q equal sub-ranges with trusted frequencies;
  cost = sum of (1 - frequency of the hit sub-range), 1 when out of range.
* ``nrc``  - per-channel top-P rank frequencies; the cost is a safety score
  (larger is safer).
* ``knnc`` - raw trusted activation vectors; cost = neighbours (among the G
  nearest) whose class differs from the prediction.

All activations are handled as ``{tap_id: (N, width) float32}`` dictionaries
("active states"). Aggregation works on mini-batches: each batch produces a
partial aggregate and partials are merged with ``merge_partial_signatures``.
MRC and NRC partials keep integer counts; frequencies are only formed by
``finalize``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
COST = "cost"
SAFETY = "safety"
DEFAULT_Q = 16
DEFAULT_P = 2
DEFAULT_G = 75


class AbsentClassError(KeyError):
    pass


class LayoutMismatchError(ValueError):
    pass


def confidence_from_cost(eta, tau):
    """exp(-eta ln2 / tau): 1 at eta=0, 0.5 at eta=tau, strictly decreasing."""
    eta = np.asarray(eta, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    return np.exp(-(eta / tau) * LN2)


def confidence_from_safety(eta, tau):
    """1 - exp(-eta ln2 / tau): 0 at eta=0, 0.5 at eta=tau, strictly increasing."""
    return 1.0 - confidence_from_cost(eta, tau)


def is_safe(eta, tau, sense=COST):
    """The c >= 0.5 decision expressed on the cost scale."""
    eta = np.asarray(eta, dtype=np.float64)
    return eta <= tau if sense == COST else eta >= tau


@dataclass
class Confidence:
    c: np.ndarray
    eta: np.ndarray
    predicted: np.ndarray

    @property
    def safe(self):
        return self.c >= 0.5


def _taps_key(taps):
    return tuple((t.tap_id, t.width, t.channels) for t in taps)


def _check_layout(a, b):
    if type(a) is not type(b):
        raise LayoutMismatchError(f"cannot merge {type(a).__name__} with {type(b).__name__}")
    if _taps_key(a.taps) != _taps_key(b.taps) or a.class_count != b.class_count:
        raise LayoutMismatchError("tap or class layout differs")


def _check_class(sig, pred):
    pred = np.asarray(pred)
    absent = np.flatnonzero(sig.counts == 0)
    if len(absent) and np.isin(pred, absent).any():
        raise AbsentClassError(f"no signature for class(es) {sorted(set(pred[np.isin(pred, absent)].tolist()))}")


# --------------------------------------------------------------------- SRC

@dataclass
class SrcSignature:
    taps: tuple
    class_count: int
    vmin: dict  # tap_id -> (m, width) float32; +inf for absent classes
    vmax: dict  # tap_id -> (m, width) float32; -inf for absent classes
    counts: np.ndarray  # (m,) trusted samples per class
    cam = "src"

    @classmethod
    def empty(cls, taps, class_count):
        return cls(
            tuple(taps), class_count,
            {t.tap_id: np.full((class_count, t.width), np.inf, np.float32) for t in taps},
            {t.tap_id: np.full((class_count, t.width), -np.inf, np.float32) for t in taps},
            np.zeros(class_count, np.int64),
        )

    @property
    def params(self):
        return {}


def src_partial(active, labels, taps, class_count) -> SrcSignature:
    sig = SrcSignature.empty(taps, class_count)
    labels = np.asarray(labels)
    for c in np.unique(labels):
        sel = labels == c
        sig.counts[c] = sel.sum()
        for t in taps:
            rows = active[t.tap_id][sel]
            sig.vmin[t.tap_id][c] = rows.min(axis=0)
            sig.vmax[t.tap_id][c] = rows.max(axis=0)
    return sig


def _merge_src(a: SrcSignature, b: SrcSignature) -> SrcSignature:
    return SrcSignature(
        a.taps, a.class_count,
        {t: np.minimum(a.vmin[t], b.vmin[t]) for t in a.vmin},
        {t: np.maximum(a.vmax[t], b.vmax[t]) for t in a.vmax},
        a.counts + b.counts,
    )


def cost_src(active, sig: SrcSignature, pred) -> np.ndarray:
    """Number of monitored neurons outside the predicted class's range."""
    _check_class(sig, pred)
    pred = np.asarray(pred)
    eta = np.zeros(len(pred), np.float64)
    for t in sig.taps:
        v = active[t.tap_id]
        out = (v < sig.vmin[t.tap_id][pred]) | (v > sig.vmax[t.tap_id][pred])
        eta += out.sum(axis=1)
    return eta


def confidence_src(active, sig, pred, tau) -> Confidence:
    eta = cost_src(active, sig, pred)
    return Confidence(confidence_from_cost(eta, tau), eta, np.asarray(pred))


# --------------------------------------------------------------------- MRC

def mrc_section(v, vmin, vmax, Q):
    """0-based sub-range index: max(1, ceil((v - vmin) / delta)) - 1, clipped to Q - 1.

    A constant neuron (delta = 0) maps everything to the first sub-range.
    """
    v = np.asarray(v, np.float64)
    lo = np.asarray(vmin, np.float64)
    delta = (np.asarray(vmax, np.float64) - lo) / Q
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.ceil((v - lo) / delta)
    q = np.where(delta > 0, q, 1.0)
    q = np.nan_to_num(q, nan=1.0, posinf=Q, neginf=1.0)
    return (np.clip(q, 1, Q) - 1).astype(np.int64)


@dataclass
class MrcCounts:
    """Partial MRC aggregate: fixed ranges plus raw sub-range hit counts."""

    taps: tuple
    class_count: int
    Q: int
    vmin: dict
    vmax: dict
    hist: dict  # tap_id -> (m, Q, width) int64
    counts: np.ndarray
    cam = "mrc"

    @classmethod
    def empty(cls, ranges: SrcSignature, Q):
        return cls(ranges.taps, ranges.class_count, Q, ranges.vmin, ranges.vmax,
                   {t.tap_id: np.zeros((ranges.class_count, Q, t.width), np.int64) for t in ranges.taps},
                   np.zeros(ranges.class_count, np.int64))

    def finalize(self) -> "MrcSignature":
        denom = np.maximum(self.counts, 1)[:, None, None]
        lam = {t: (h / denom).astype(np.float32) for t, h in self.hist.items()}
        return MrcSignature(self.taps, self.class_count, self.Q, self.vmin, self.vmax, lam, self.counts.copy())


def mrc_partial(active, labels, ranges: SrcSignature, Q) -> MrcCounts:
    part = MrcCounts.empty(ranges, Q)
    labels = np.asarray(labels)
    for c in np.unique(labels):
        sel = labels == c
        part.counts[c] = sel.sum()
        for t in ranges.taps:
            w = t.width
            q = mrc_section(active[t.tap_id][sel], ranges.vmin[t.tap_id][c], ranges.vmax[t.tap_id][c], Q)
            flat = (q * w + np.arange(w)).ravel()
            part.hist[t.tap_id][c] += np.bincount(flat, minlength=Q * w).reshape(Q, w)
    return part


def _merge_mrc(a: MrcCounts, b: MrcCounts) -> MrcCounts:
    if a.Q != b.Q:
        raise LayoutMismatchError(f"Q differs: {a.Q} vs {b.Q}")
    for t in a.vmin:
        if not (np.array_equal(a.vmin[t], b.vmin[t]) and np.array_equal(a.vmax[t], b.vmax[t])):
            raise LayoutMismatchError("MRC partials were built against different ranges")
    return replace(a, hist={t: a.hist[t] + b.hist[t] for t in a.hist}, counts=a.counts + b.counts)


@dataclass
class MrcSignature:
    taps: tuple
    class_count: int
    Q: int
    vmin: dict
    vmax: dict
    lam: dict  # tap_id -> (m, Q, width) float32
    counts: np.ndarray
    cam = "mrc"

    @property
    def params(self):
        return {"Q": self.Q}


def cost_mrc(active, sig: MrcSignature, pred) -> np.ndarray:
    _check_class(sig, pred)
    pred = np.asarray(pred)
    eta = np.zeros(len(pred), np.float64)
    for t in sig.taps:
        v = active[t.tap_id]
        lo, hi = sig.vmin[t.tap_id][pred], sig.vmax[t.tap_id][pred]
        inside = (v >= lo) & (v <= hi)
        q = mrc_section(v, lo, hi, sig.Q)
        lam = np.take_along_axis(sig.lam[t.tap_id][pred], q[:, None, :], axis=1)[:, 0, :]
        eta += np.where(inside, 1.0 - lam.astype(np.float64), 1.0).sum(axis=1)
    return eta


def confidence_mrc(active, sig, pred, tau) -> Confidence:
    eta = cost_mrc(active, sig, pred)
    return Confidence(confidence_from_cost(eta, tau), eta, np.asarray(pred))


# --------------------------------------------------------------------- NRC

def top_p_mask(v, channels: int, P: int) -> np.ndarray:
    """True where a neuron ranks within the top P of its channel.

    Ranking is by descending value; equal values rank by lower neuron index.
    """
    v = np.asarray(v)
    n, w = v.shape
    size = w // channels
    P = min(P, size)
    grouped = v.reshape(n, channels, size)
    order = np.argsort(-grouped, axis=-1, kind="stable")[..., :P]
    mask = np.zeros(grouped.shape, bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask.reshape(n, w)


@dataclass
class NrcCounts:
    taps: tuple
    class_count: int
    P: int
    hits: dict  # tap_id -> (m, width) int64
    counts: np.ndarray
    cam = "nrc"

    @classmethod
    def empty(cls, taps, class_count, P):
        return cls(tuple(taps), class_count, P,
                   {t.tap_id: np.zeros((class_count, t.width), np.int64) for t in taps},
                   np.zeros(class_count, np.int64))

    def finalize(self) -> "NrcSignature":
        denom = np.maximum(self.counts, 1)[:, None]
        return NrcSignature(self.taps, self.class_count, self.P,
                            {t: (h / denom).astype(np.float32) for t, h in self.hits.items()},
                            self.counts.copy())


def _clamp_p(P, taps):
    smallest = min(t.channel_size for t in taps)
    if P > smallest:
        log.warning("P=%d exceeds smallest channel size %d; clamping per channel", P, smallest)
    return P


def nrc_partial(active, labels, taps, class_count, P) -> NrcCounts:
    if P < 1:
        raise ValueError("P must be >= 1")
    part = NrcCounts.empty(taps, class_count, P)
    labels = np.asarray(labels)
    for t in taps:
        mask = top_p_mask(active[t.tap_id], t.channels, P)
        for c in np.unique(labels):
            part.hits[t.tap_id][c] += mask[labels == c].sum(axis=0)
    for c in np.unique(labels):
        part.counts[c] = np.sum(labels == c)
    return part


def _merge_nrc(a: NrcCounts, b: NrcCounts) -> NrcCounts:
    if a.P != b.P:
        raise LayoutMismatchError(f"P differs: {a.P} vs {b.P}")
    return replace(a, hits={t: a.hits[t] + b.hits[t] for t in a.hits}, counts=a.counts + b.counts)


@dataclass
class NrcSignature:
    taps: tuple
    class_count: int
    P: int
    lam: dict  # tap_id -> (m, width) float32
    counts: np.ndarray
    cam = "nrc"

    @property
    def params(self):
        return {"P": self.P}


def cost_nrc(active, sig: NrcSignature, pred) -> np.ndarray:
    """Sum of trusted top-P frequencies over neurons currently in the top P."""
    _check_class(sig, pred)
    pred = np.asarray(pred)
    eta = np.zeros(len(pred), np.float64)
    for t in sig.taps:
        mask = top_p_mask(active[t.tap_id], t.channels, sig.P)
        eta += np.where(mask, sig.lam[t.tap_id][pred].astype(np.float64), 0.0).sum(axis=1)
    return eta


def confidence_nrc(active, sig, pred, tau) -> Confidence:
    eta = cost_nrc(active, sig, pred)
    return Confidence(confidence_from_safety(eta, tau), eta, np.asarray(pred))


# -------------------------------------------------------------------- kNNC

_U32 = 2.0 ** -24


def _row_norms(rows, chunk=8192):
    out = np.empty(len(rows), np.float64)
    for i in range(0, len(rows), chunk):
        r = np.asarray(rows[i:i + chunk], np.float64)
        out[i:i + chunk] = np.sqrt(np.einsum("ij,ij->i", r, r))
    return out


def knn_search(queries, rows, G: int, row_norms=None, chunk: int = 8192) -> np.ndarray:
    """Exact Euclidean G nearest rows for each query, ties broken by row index.

    Returns (B, G) row indices ordered by (distance, index). A float32 GEMM pass
    selects candidates using a rigorous rounding-error margin, then candidates
    are re-ranked on float64 distances.
    """
    rows_n = len(rows)
    if G > rows_n:
        raise ValueError(f"G={G} exceeds the {rows_n} stored rows")
    if G < 1:
        raise ValueError("G must be >= 1")
    q = np.atleast_2d(np.asarray(queries, np.float32))
    B, w = q.shape
    if row_norms is None:
        row_norms = _row_norms(rows, chunk)
    q64 = q.astype(np.float64)
    qnorm = np.sqrt(np.einsum("ij,ij->i", q64, q64))
    gamma = (w + 4) * _U32 / (1 - (w + 4) * _U32)
    margin = 2.0 * gamma * (qnorm + row_norms.max()) ** 2 + 1e-30
    qn32 = (qnorm ** 2).astype(np.float32)
    rn32 = (row_norms ** 2).astype(np.float32)

    best = np.full((B, G), np.inf, np.float32)  # running G smallest approximate distances
    cand_q, cand_r, cand_d = [], [], []
    for start in range(0, rows_n, chunk):
        block = np.asarray(rows[start:start + chunk], np.float32)
        d = qn32[:, None] + rn32[None, start:start + len(block)] - 2.0 * (q @ block.T)
        merged = np.concatenate([best, d], axis=1)
        best = np.partition(merged, G - 1, axis=1)[:, :G]
        kth = best.max(axis=1).astype(np.float64)
        qi, rj = np.nonzero(d <= (kth + margin)[:, None])
        cand_q.append(qi)
        cand_r.append(rj + start)
        cand_d.append(d[qi, rj])
    cand_q = np.concatenate(cand_q)
    cand_r = np.concatenate(cand_r)
    cand_d = np.concatenate(cand_d).astype(np.float64)
    kth = best.max(axis=1).astype(np.float64)
    keep = cand_d <= kth[cand_q] + margin[cand_q]
    cand_q, cand_r = cand_q[keep], cand_r[keep]

    out = np.empty((B, G), np.int64)
    order = np.argsort(cand_q, kind="stable")
    cand_q, cand_r = cand_q[order], cand_r[order]
    bounds = np.searchsorted(cand_q, np.arange(B + 1))
    for b in range(B):
        idx = np.sort(cand_r[bounds[b]:bounds[b + 1]])
        diff = np.asarray(rows[idx], np.float64) - q64[b]
        dist = np.einsum("ij,ij->i", diff, diff)
        sel = np.lexsort((idx, dist))[:G]
        out[b] = idx[sel]
    return out


def knn_bruteforce(queries, rows, G):
    """Reference: full float64 distance sort."""
    q = np.atleast_2d(np.asarray(queries, np.float64))
    r = np.asarray(rows, np.float64)
    out = []
    for qq in q:
        diff = r - qq
        d = np.einsum("ij,ij->i", diff, diff)
        out.append(np.lexsort((np.arange(len(r)), d))[:G])
    return np.array(out)


@dataclass
class KnncSignature:
    taps: tuple
    class_count: int
    rows: dict  # tap_id -> (R, width) float32, possibly memory-mapped
    labels: np.ndarray  # (R,) class of each row
    counts: np.ndarray
    G: int = DEFAULT_G
    _norms: dict = field(default_factory=dict, repr=False, compare=False)
    cam = "knnc"

    @property
    def params(self):
        return {"G": self.G}

    def norms(self, tap_id):
        if tap_id not in self._norms:
            self._norms[tap_id] = _row_norms(self.rows[tap_id])
        return self._norms[tap_id]


def knnc_partial(active, labels, taps, class_count, G=DEFAULT_G) -> KnncSignature:
    labels = np.asarray(labels, np.int64)
    order = np.argsort(labels, kind="stable")
    return KnncSignature(tuple(taps), class_count,
                         {t.tap_id: np.asarray(active[t.tap_id], np.float32)[order] for t in taps},
                         labels[order], np.bincount(labels, minlength=class_count).astype(np.int64), G)


def _merge_knnc(a: KnncSignature, b: KnncSignature) -> KnncSignature:
    labels = np.concatenate([a.labels, b.labels])
    order = np.argsort(labels, kind="stable")
    return KnncSignature(a.taps, a.class_count,
                         {t: np.concatenate([a.rows[t], b.rows[t]])[order] for t in a.rows},
                         labels[order], a.counts + b.counts, a.G)


def cost_knnc(active, sig: KnncSignature, pred, G=None, count_matches: bool = False, batch: int = 512) -> np.ndarray:
    """Neighbour label mismatches summed over taps.

    ``count_matches=True`` counts neighbours agreeing with the prediction
    instead (the literal reading of the published pseudo-code).
    """
    _check_class(sig, pred)
    G = G or sig.G
    pred = np.asarray(pred)
    eta = np.zeros(len(pred), np.float64)
    for t in sig.taps:
        v = active[t.tap_id]
        norms = sig.norms(t.tap_id)
        for i in range(0, len(pred), batch):
            idx = knn_search(v[i:i + batch], sig.rows[t.tap_id], G, row_norms=norms)
            same = sig.labels[idx] == pred[i:i + batch, None]
            eta[i:i + batch] += same.sum(axis=1) if count_matches else (~same).sum(axis=1)
    return eta


def confidence_knnc(active, sig, pred, tau, G=None, count_matches=False) -> Confidence:
    eta = cost_knnc(active, sig, pred, G, count_matches)
    return Confidence(confidence_from_cost(eta, tau), eta, np.asarray(pred))


# ------------------------------------------------------------- generic API

_MERGE = {SrcSignature: _merge_src, MrcCounts: _merge_mrc, NrcCounts: _merge_nrc, KnncSignature: _merge_knnc}
_COST = {"src": cost_src, "mrc": cost_mrc, "nrc": cost_nrc, "knnc": cost_knnc}
SENSE = {"src": COST, "mrc": COST, "nrc": SAFETY, "knnc": COST}


def merge_partial_signatures(a, b):
    _check_layout(a, b)
    return _MERGE[type(a)](a, b)


@dataclass(frozen=True)
class CamSpec:
    """A method plus its parameter, e.g. ``CamSpec("mrc", 32)`` (label MRC-32)."""

    kind: str
    param: int | None = None

    def __post_init__(self):
        if self.kind not in _COST:
            raise ValueError(f"unknown CAM {self.kind!r}")
        if self.param is None:
            object.__setattr__(self, "param", {"mrc": DEFAULT_Q, "nrc": DEFAULT_P, "knnc": DEFAULT_G}.get(self.kind))

    @property
    def label(self):
        return {"src": "SRC", "mrc": f"MRC-{self.param}", "nrc": "NRC", "knnc": "kNNC"}[self.kind]

    @property
    def sense(self):
        return SENSE[self.kind]

    @classmethod
    def parse(cls, text: str) -> "CamSpec":
        name, _, param = text.strip().lower().partition("-")
        return cls(name, int(param) if param else None)


def coverage_cost(active, sig, pred, **kw) -> np.ndarray:
    return _COST[sig.cam](active, sig, pred, **kw)


def confidence(active, sig, pred, tau, **kw) -> Confidence:
    eta = coverage_cost(active, sig, pred, **kw)
    f = confidence_from_safety if SENSE[sig.cam] == SAFETY else confidence_from_cost
    return Confidence(f(eta, tau), eta, np.asarray(pred))


def _batches(images, labels, batch_size):
    for i in range(0, len(labels), batch_size):
        yield images[i:i + batch_size], labels[i:i + batch_size]


def _resolve_taps(model, taps):
    infos = model.tap_infos
    return tuple(infos[t] for t in sorted(taps))


def aggregate_src(images, labels, model, taps, batch_size=1000) -> SrcSignature:
    taps = _resolve_taps(model, taps)
    sig = SrcSignature.empty(taps, model.class_count)
    for xb, yb in _batches(images, labels, batch_size):
        act = nn.forward(model, xb, [t.tap_id for t in taps]).taps
        sig = merge_partial_signatures(sig, src_partial(act, yb, taps, model.class_count))
    return sig


def aggregate_mrc(images, labels, model, taps, Q=DEFAULT_Q, batch_size=1000, ranges=None) -> MrcSignature:
    """Two passes: ranges (shared with SRC) first, then sub-range counts."""
    if Q < 2:
        raise ValueError("Q must be >= 2")
    ranges = ranges or aggregate_src(images, labels, model, taps, batch_size)
    part = MrcCounts.empty(ranges, Q)
    for xb, yb in _batches(images, labels, batch_size):
        act = nn.forward(model, xb, [t.tap_id for t in ranges.taps]).taps
        part = merge_partial_signatures(part, mrc_partial(act, yb, ranges, Q))
    return part.finalize()


def aggregate_nrc(images, labels, model, taps, P=DEFAULT_P, batch_size=1000) -> NrcSignature:
    taps = _resolve_taps(model, taps)
    _clamp_p(P, taps)
    part = NrcCounts.empty(taps, model.class_count, P)
    for xb, yb in _batches(images, labels, batch_size):
        act = nn.forward(model, xb, [t.tap_id for t in taps]).taps
        part = merge_partial_signatures(part, nrc_partial(act, yb, taps, model.class_count, P))
    return part.finalize()


def aggregate_knnc(images, labels, model, taps, G=DEFAULT_G, batch_size=1000) -> KnncSignature:
    """In-memory kNNC signature. For large trusted sets use ``store.write_knnc_streaming``."""
    taps = _resolve_taps(model, taps)
    act = nn.forward(model, images, [t.tap_id for t in taps], batch_size).taps
    return knnc_partial(act, labels, taps, model.class_count, G)


def aggregate(cam: CamSpec, images, labels, model, taps, batch_size=1000, ranges=None):
    if cam.kind == "src":
        return ranges if ranges is not None else aggregate_src(images, labels, model, taps, batch_size)
    if cam.kind == "mrc":
        return aggregate_mrc(images, labels, model, taps, cam.param, batch_size, ranges)
    if cam.kind == "nrc":
        return aggregate_nrc(images, labels, model, taps, cam.param, batch_size)
    return aggregate_knnc(images, labels, model, taps, cam.param, batch_size)
