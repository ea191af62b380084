"""Unsafe-input generators and the two baseline detectors.

All generators are batched: ``x`` is (N, 28, 28) in [0, 1] and every sample is
attacked independently, so results do not depend on how a pool is split into
batches (the network's eval path is batch-size invariant).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .cams import SrcSignature

log = logging.getLogger(__name__)

METHODS = ("fgsm", "pgd", "bim", "cw", "ood", "patch", "signature")


@dataclass(frozen=True)
class AttackConfig:
    method: str
    eps: float = 0.0
    alpha: float = 0.0
    k: int = 0
    gamma: float = 0.0
    target: int | None = None  # ood: fixed target; None draws one per sample
    patch: tuple = (0, 0, 8, 8)  # row, col, height, width
    wrong_score: float = 0.8
    c: float = 1e-4
    kappa: float = 0.0
    lr: float = 0.01  # CW Adam step
    stop_score: float = 0.99  # ood early stop
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}")
        if self.eps < 0 or self.k < 0:
            raise ValueError("eps and k must be >= 0")
        if self.method in ("pgd", "bim", "signature") and self.k > 0 and self.alpha <= 0:
            raise ValueError("alpha must be > 0 for iterative attacks")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        object.__setattr__(self, "patch", tuple(self.patch))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AdversarialSample:
    image: np.ndarray
    source: np.ndarray
    source_label: int
    predicted: int
    score: float
    method: str


@dataclass
class AdversarialSet:
    """Generated images for a pool of sources, accepted or not."""

    images: np.ndarray  # (N, 28, 28) float32
    source_index: np.ndarray  # position in the source pool / split
    source_label: np.ndarray
    predicted: np.ndarray
    score: np.ndarray
    method: str
    config_hash: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.source_index)

    def subset(self, idx) -> "AdversarialSet":
        return AdversarialSet(self.images[idx], self.source_index[idx], self.source_label[idx],
                              self.predicted[idx], self.score[idx], self.method, self.config_hash, dict(self.meta))

    def accepted(self, wrong_score: float) -> np.ndarray:
        """Indices predicted as a wrong class with score above ``wrong_score``."""
        return np.flatnonzero((self.predicted != self.source_label) & (self.score > wrong_score))

    def sample(self, i, sources) -> AdversarialSample:
        return AdversarialSample(self.images[i], sources[self.source_index[i]], int(self.source_label[i]),
                                 int(self.predicted[i]), float(self.score[i]), self.method)


def _finish(model, adv, index, labels, cfg: AttackConfig, meta=None) -> AdversarialSet:
    adv = np.clip(np.asarray(adv, np.float32), 0.0, 1.0)
    pred, score = nn.predict(model, adv) if len(adv) else (np.zeros(0, np.int64), np.zeros(0))
    return AdversarialSet(adv, np.asarray(index, np.int64), np.asarray(labels, np.int64), pred.astype(np.int64),
                          score.astype(np.float64), cfg.method, cfg.digest(), meta or {})


def _ce_grad(model, x, y):
    return nn.input_gradient(model, x, nn.CrossEntropyLoss(y))


# ------------------------------------------------------------ gradient attacks

def fgsm(model, x, y, eps):
    x = np.asarray(x, np.float32)
    return np.clip(x + np.float32(eps) * np.sign(_ce_grad(model, x, y)), 0, 1).astype(np.float32)


def _project(adv, x, eps):
    return np.clip(np.clip(adv, x - np.float32(eps), x + np.float32(eps)), 0, 1).astype(np.float32)


def projected_ascent(model, x, y, eps, alpha, k, start=None, direction=None):
    """k steps of ``alpha * sign(direction)`` with projection to the eps-ball and [0, 1].

    ``direction(adv) -> array`` defaults to the cross-entropy gradient.
    """
    x = np.asarray(x, np.float32)
    adv = x.copy() if start is None else _project(np.asarray(start, np.float32), x, eps)
    direction = direction or (lambda a: _ce_grad(model, a, y))
    for _ in range(k):
        adv = _project(adv + np.float32(alpha) * np.sign(direction(adv)), x, eps)
    return adv


def pgd(model, x, y, eps, alpha, k, random_start=False, seed=0):
    if alpha > eps:
        log.warning("pgd step alpha=%g exceeds eps=%g", alpha, eps)
    start = None
    if random_start:
        rng = np.random.default_rng(seed)
        start = np.asarray(x, np.float32) + rng.uniform(-eps, eps, np.shape(x)).astype(np.float32)
    return projected_ascent(model, x, y, eps, alpha, k, start)


def bim(model, x, y, eps, alpha, k):
    return projected_ascent(model, x, y, eps, alpha, k)


def cw(model, x, y, k, c=1e-4, kappa=0.0, lr=0.01, accept_score=0.8):
    """L2 Carlini-Wagner in tanh space with Adam, fixed c.

    Returns ``(adv, found)``: per sample the lowest-distortion iterate that is
    predicted as a wrong class with softmax score above ``accept_score``
    (``found`` False keeps the last iterate). Already-misclassified inputs are
    returned unchanged.
    """
    x = np.asarray(x, np.float32)
    y_t = torch.from_numpy(np.asarray(y, np.int64))
    x_t = torch.from_numpy(x).reshape(-1, 1, 28, 28)
    w = torch.atanh((x_t * 2 - 1).clamp(-1 + 1e-6, 1 - 1e-6)).clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)
    best = x.reshape(-1, 1, 28, 28).copy()
    best_d = np.full(len(x), np.inf)

    def check(adv, logits):
        prob = torch.softmax(logits.double(), 1)
        score, pred = prob.max(1)
        ok = ((pred != y_t) & (score > accept_score)).numpy()
        d = ((adv - x_t) ** 2).flatten(1).sum(1).detach().double().numpy()
        better = ok & (d < best_d)
        best[better] = adv.detach().numpy()[better]
        best_d[better] = d[better]

    with torch.no_grad():
        logits, _ = model.net(x_t)
    check(x_t, logits)
    onehot = F.one_hot(y_t, model.class_count).bool()
    for _ in range(k):
        adv = (torch.tanh(w) + 1) / 2
        logits, _ = model.net(adv)
        real = logits[onehot]
        other = logits.masked_fill(onehot, -torch.inf).max(1).values
        margin = torch.clamp(real - other, min=-kappa)
        dist = ((adv - x_t) ** 2).flatten(1).sum(1)
        loss = (dist + c * margin).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        check(adv, logits)
    found = np.isfinite(best_d)
    last = ((torch.tanh(w) + 1) / 2).detach().numpy()
    out = np.where(found[:, None, None, None], best, last)
    return out.reshape(x.shape).astype(np.float32), found


def ood_targeted(model, x, target, eps, k, stop_score=0.99):
    """Multi-step targeted FGSM with decaying steps eps/1, eps/4, eps/9, ...

    No eps-ball projection; pixels stay in [0, 1]. Each sample stops once its
    target score reaches ``stop_score``. Returns ``(adv, reached)``.
    """
    adv = np.asarray(x, np.float32).copy()
    target = np.broadcast_to(np.asarray(target, np.int64), (len(adv),)).copy()
    reached = np.zeros(len(adv), bool)
    for step in range(k + 1):
        probs = nn.forward(model, adv).probabilities.astype(np.float64)
        reached = probs[np.arange(len(adv)), target] >= stop_score
        if step == k or reached.all():
            break
        live = np.flatnonzero(~reached)
        g = _ce_grad(model, adv[live], target[live])
        adv[live] = np.clip(adv[live] - np.float32(eps / (step + 1) ** 2) * np.sign(g), 0, 1)
    return adv, reached


def patch_mask(shape=(28, 28), patch=(0, 0, 8, 8)):
    r, c, h, w = patch
    if r < 0 or c < 0 or r + h > shape[0] or c + w > shape[1]:
        raise ValueError(f"patch {patch} outside image {shape}")
    m = np.zeros(shape, np.float32)
    m[r:r + h, c:c + w] = 1
    return m


def patch_attack(model, x, y, eps, k, patch=(0, 0, 8, 8)):
    """Signed gradient ascent restricted to the patch; other pixels are untouched."""
    x = np.asarray(x, np.float32)
    mask = patch_mask(x.shape[-2:], patch).astype(bool)
    adv = x.copy()
    for _ in range(k):
        g = _ce_grad(model, adv, y)
        stepped = np.clip(adv + np.float32(eps) * np.sign(g), 0, 1)
        adv = np.where(mask, stepped, x).astype(np.float32)
    return adv


# ----------------------------------------------------------- signature attack

def signature_bounds(sig: SrcSignature, pred):
    pred = np.asarray(pred)
    return ({t: sig.vmin[t][pred] for t in sig.vmin}, {t: sig.vmax[t][pred] for t in sig.vmax})


def signature_loss(active: dict, sig: SrcSignature, pred) -> np.ndarray:
    """Per-sample sum of hinge penalties relu(v - vmax) + relu(vmin - v)."""
    lo, hi = signature_bounds(sig, pred)
    total = 0.0
    for t, v in active.items():
        v = np.asarray(v, np.float64)
        total = total + (np.maximum(v - hi[t], 0) + np.maximum(lo[t] - v, 0)).sum(axis=1)
    return np.asarray(total, np.float64)


def _unit(g):
    """Per-sample L2 normalisation; zero-norm samples come back as zeros."""
    flat = g.reshape(len(g), -1).astype(np.float64)
    norm = np.linalg.norm(flat, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    return (flat / safe[:, None]).reshape(g.shape), norm > 0


def signature_attack(model, sig: SrcSignature, x, pred, eps, alpha, k, gamma):
    """PGD-style ascent on (1-gamma) * unit(grad CE) - gamma * unit(grad L_S).

    ``pred`` is the model's class for the clean input; it labels both the
    cross-entropy term and the signature ranges used by L_S.
    """
    x = np.asarray(x, np.float32)
    pred = np.asarray(pred, np.int64)
    lo, hi = signature_bounds(sig, pred)
    spec = nn.SignatureLossSpec(lo, hi)

    def direction(adv):
        g_ce, ok_ce = _unit(_ce_grad(model, adv, pred))
        if gamma == 0:
            return g_ce
        g_s, ok_s = _unit(nn.input_gradient(model, adv, spec))
        if not ok_s.all() or not ok_ce.all():
            log.debug("dropping %d zero-norm gradient terms", int((~ok_s).sum() + (~ok_ce).sum()))
        return (1 - gamma) * g_ce - gamma * g_s

    return projected_ascent(model, x, pred, eps, alpha, k, direction=direction)


# ------------------------------------------------------------- generation API

def generate(model, cfg: AttackConfig, images, labels, index=None, sig: SrcSignature | None = None,
             batch_size: int = 500) -> AdversarialSet:
    """Run ``cfg`` over a pool; ``index`` records source positions (default 0..N-1)."""
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels, np.int64)
    index = np.arange(len(images)) if index is None else np.asarray(index)
    rng = np.random.default_rng(cfg.seed)
    targets = None
    if cfg.method == "ood":
        if cfg.target is not None:
            targets = np.full(len(labels), cfg.target)
        else:  # uniform over the other classes, reproducible per pool
            targets = (labels + rng.integers(1, model.class_count, len(labels))) % model.class_count
    out, flags = [], []
    for s in range(0, len(images), batch_size):
        xb, yb = images[s:s + batch_size], labels[s:s + batch_size]
        flag = np.ones(len(xb), bool)
        if cfg.method == "fgsm":
            adv = fgsm(model, xb, yb, cfg.eps)
        elif cfg.method == "pgd":
            adv = pgd(model, xb, yb, cfg.eps, cfg.alpha, cfg.k, cfg.random_start, cfg.seed + s)
        elif cfg.method == "bim":
            adv = bim(model, xb, yb, cfg.eps, cfg.alpha, cfg.k)
        elif cfg.method == "cw":
            adv, flag = cw(model, xb, yb, cfg.k, cfg.c, cfg.kappa, cfg.lr, cfg.wrong_score)
        elif cfg.method == "ood":
            adv, flag = ood_targeted(model, xb, targets[s:s + batch_size], cfg.eps, cfg.k, cfg.stop_score)
        elif cfg.method == "patch":
            adv = patch_attack(model, xb, yb, cfg.eps, cfg.k, cfg.patch)
        else:
            if sig is None:
                raise ValueError("signature attack needs an SRC signature")
            pred, _ = nn.predict(model, xb)
            adv = signature_attack(model, sig, xb, pred, cfg.eps, cfg.alpha, cfg.k, cfg.gamma)
        out.append(adv)
        flags.append(flag)
    adv = np.concatenate(out) if out else np.zeros((0, 28, 28), np.float32)
    meta = {"converged": int(np.concatenate(flags).sum()) if flags else 0}
    if targets is not None:
        meta["targets"] = targets.tolist()
    return _finish(model, adv, index, labels, cfg, meta)


# ------------------------------------------------------------------ baselines

def bit_depth_reduce(x, bits: int):
    levels = 2 ** bits - 1
    return (np.round(np.asarray(x, np.float32) * levels) / levels).astype(np.float32)


def median_smooth(x, window: int = 2):
    """Median over a ``window`` x ``window`` neighbourhood (edge-replicated)."""
    x = np.asarray(x, np.float32)
    lead, tail = (window - 1) // 2, window // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(lead, tail), (lead, tail)]
    win = np.lib.stride_tricks.sliding_window_view(np.pad(x, pad, mode="edge"), (window, window), axis=(-2, -1))
    return np.median(win, axis=(-2, -1)).astype(np.float32)


_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]], np.float64)


def _dct_matrix(n=8):
    k = np.arange(n)
    m = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_D = _dct_matrix()


def quant_table(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError("quality must lie in [1, 100]")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.maximum(np.floor((_LUMA * scale + 50) / 100), 1)


def jpeg_like_compress(x, quality: int = 50):
    """8x8 block DCT, luminance-table quantisation, inverse DCT, clip."""
    x = np.asarray(x, np.float32)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    n, h, w = xb.shape
    H, W = -(-h // 8) * 8, -(-w // 8) * 8
    p = np.pad(xb.astype(np.float64) * 255 - 128, ((0, 0), (0, H - h), (0, W - w)), mode="edge")
    blocks = p.reshape(n, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = _D @ blocks @ _D.T
    q = quant_table(quality)
    rec = _D.T @ (np.round(coef / q) * q) @ _D
    out = rec.transpose(0, 1, 3, 2, 4).reshape(n, H, W)[:, :h, :w]
    out = np.clip((out + 128) / 255, 0, 1).astype(np.float32)
    return out[0] if squeeze else out


def _log_probs(model, x):
    logits = nn.forward(model, x).logits.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kl_divergence(log_p, log_q):
    return (np.exp(log_p) * (log_p - log_q)).sum(axis=-1)


def vision_guard_score(model, x, quality: int = 50):
    """min(KL(p||q), KL(q||p)) between outputs on x and on its compressed copy."""
    lp, lq = _log_probs(model, x), _log_probs(model, jpeg_like_compress(x, quality))
    return np.maximum(np.minimum(kl_divergence(lp, lq), kl_divergence(lq, lp)), 0.0)


def feature_squeezing_score(model, x, bits: int = 1, window: int = 2):
    """max L1 distance between outputs on x and on each squeezed copy."""
    p = np.exp(_log_probs(model, x))
    scores = [np.abs(p - np.exp(_log_probs(model, s(x)))).sum(axis=1)
              for s in (lambda a: bit_depth_reduce(a, bits), lambda a: median_smooth(a, window))]
    return np.maximum(*scores)


def baseline_unsafe(score, tau):
    return np.asarray(score) >= tau


# ---------------------------------------------------------------- record file

def write_adversarial(adv: AdversarialSet, path, config: AttackConfig | None = None) -> int:
    """Persist an adversarial set as a container of kind "adversarial"."""
    from . import store

    manifest = {"kind": "adversarial", "method": adv.method, "config_hash": adv.config_hash,
                "config": asdict(config) if config else None, "meta": adv.meta, "count": len(adv)}
    blocks = [store._array_block("images", adv.images.astype("<f4")),
              store._array_block("source_index", adv.source_index.astype("<i8")),
              store._array_block("source_label", adv.source_label.astype("<i8")),
              store._array_block("predicted", adv.predicted.astype("<i8")),
              store._array_block("score", adv.score.astype("<f8"))]
    return store._write_container(path, manifest, blocks)


def read_adversarial(path) -> AdversarialSet:
    from . import store

    c = store.open_container(path)
    m = c.manifest
    if m.get("kind") != "adversarial":
        raise store.StoreError(f"{path}: not an adversarial record file")
    return AdversarialSet(c.array("images"), c.array("source_index").astype(np.int64),
                          c.array("source_label").astype(np.int64), c.array("predicted").astype(np.int64),
                          c.array("score").astype(np.float64), m["method"], m["config_hash"], m.get("meta", {}))
