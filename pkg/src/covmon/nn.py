"""Small conv-net core with pass-through activation taps.

The network is an ordered list of ``LayerSpec`` entries executed by torch on
CPU. ``tap`` layers are identities that record the activations flowing through
them, so the monitor can observe hidden layers without touching the
prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, 28, 28)
LAYER_KINDS = ("conv", "relu", "maxpool", "fc", "softmax", "tap")


class InputShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class TapInfo:
    """Shape of one tap: ``width`` neurons split into ``channels`` equal groups."""

    tap_id: int
    width: int
    channels: int

    @property
    def channel_size(self) -> int:
        return self.width // self.channels


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class ForwardResult:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted: np.ndarray
    score: np.ndarray
    taps: dict  # tap_id -> (N, width) float32


class _Net(nn.Module):
    def __init__(self, layers):
        super().__init__()
        self.specs = list(layers)
        mods = []
        shape = INPUT_SHAPE
        self.tap_infos = {}
        for spec in self.specs:
            p = spec.params
            if spec.kind == "conv":
                c, h, w = shape
                k, s = p["kernel"], p.get("stride", 1)
                mods.append(nn.Conv2d(c, p["out_channels"], k, stride=s))
                shape = (p["out_channels"], (h - k) // s + 1, (w - k) // s + 1)
            elif spec.kind == "maxpool":
                c, h, w = shape
                k, s = p["window"], p.get("stride", p["window"])
                mods.append(nn.MaxPool2d(k, stride=s))
                shape = (c, (h - k) // s + 1, (w - k) // s + 1)
            elif spec.kind == "fc":
                mods.append(nn.Linear(int(np.prod(shape)), p["out_units"]))
                shape = (p["out_units"],)
            elif spec.kind == "tap":
                channels = shape[0] if len(shape) == 3 else 1
                self.tap_infos[p["tap_id"]] = TapInfo(p["tap_id"], int(np.prod(shape)), channels)
                mods.append(nn.Identity())
            else:
                mods.append(nn.Identity())
            if min(shape) < 1:
                raise ValueError(f"layer {spec} produces empty shape {shape}")
        self.mods = nn.ModuleList(mods)
        self.out_shape = shape

    def forward(self, x, taps=frozenset(), softmax=False):
        recorded = {}
        for spec, mod in zip(self.specs, self.mods):
            kind = spec.kind
            if kind == "conv":
                x = mod(x)
            elif kind == "relu":
                x = F.relu(x)
            elif kind == "maxpool":
                x = mod(x)
            elif kind == "fc":
                if self.training:
                    x = mod(x.flatten(1))
                else:
                    # float64 accumulation makes the result independent of batch size
                    x = F.linear(x.flatten(1).double(), mod.weight.double(), mod.bias.double()).float()
            elif kind == "tap":
                if spec.params["tap_id"] in taps:
                    recorded[spec.params["tap_id"]] = x.flatten(1)
            elif kind == "softmax" and softmax:
                x = F.softmax(x, dim=1)
        return x, recorded


class NetworkModel:
    """Layer list plus weights. Treat as read-only once trained."""

    def __init__(self, layers, class_count: int):
        self.layers = list(layers)
        self.class_count = class_count
        self.net = _Net(self.layers)
        self.net.eval()
        if self.net.out_shape != (class_count,):
            raise ValueError(f"network output {self.net.out_shape} != ({class_count},)")

    @property
    def tap_ids(self) -> list[int]:
        return list(self.net.tap_infos)

    @property
    def tap_infos(self) -> dict[int, TapInfo]:
        return dict(self.net.tap_infos)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        state = {k: torch.from_numpy(np.asarray(v, dtype=np.float32).copy()) for k, v in arrays.items()}
        self.net.load_state_dict(state)


def build_lenet4(class_count: int = 10, seed: int = 0) -> NetworkModel:
    """conv(20,5,1)-ReLU-tap-MaxPool(2,2)-conv(50,5,1)-ReLU-tap-fc(500)-ReLU-tap-fc(m)."""
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    layers = [
        LayerSpec("conv", {"out_channels": 20, "kernel": 5, "stride": 1}),
        LayerSpec("relu"),
        LayerSpec("tap", {"tap_id": 1}),
        LayerSpec("maxpool", {"window": 2, "stride": 2}),
        LayerSpec("conv", {"out_channels": 50, "kernel": 5, "stride": 1}),
        LayerSpec("relu"),
        LayerSpec("tap", {"tap_id": 2}),
        LayerSpec("fc", {"out_units": 500}),
        LayerSpec("relu"),
        LayerSpec("tap", {"tap_id": 3}),
        LayerSpec("fc", {"out_units": class_count}),
        LayerSpec("softmax"),
    ]
    model = NetworkModel(layers, class_count)
    init_weights(model, seed)
    return model


def init_weights(model: NetworkModel, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in model.net.mods:
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = float(np.sqrt(6.0 / fan_in))
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.zero_()


def _as_batch(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if t.shape[-2:] != INPUT_SHAPE[1:]:
        raise InputShapeError(f"expected trailing shape {INPUT_SHAPE[1:]}, got {tuple(t.shape)}")
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    elif t.ndim != 4 or t.shape[1] != 1:
        raise InputShapeError(f"bad input shape {tuple(t.shape)}")
    return t


def forward(model: NetworkModel, x, taps_enabled=(), batch_size: int = 1024) -> ForwardResult:
    """Run inference on one image (28, 28) or a batch (N, 28, 28).

    Outputs always carry a leading batch axis.
    """
    xb = _as_batch(x)
    taps_enabled = frozenset(taps_enabled)
    unknown = taps_enabled - set(model.tap_ids)
    if unknown:
        raise KeyError(f"unknown taps {sorted(unknown)}")
    logits, taps = [], {t: [] for t in taps_enabled}
    with torch.no_grad():
        for i in range(0, xb.shape[0], batch_size):
            out, rec = model.net(xb[i:i + batch_size], taps_enabled)
            logits.append(out)
            for t, v in rec.items():
                taps[t].append(v.numpy())
    logits = torch.cat(logits) if logits else torch.zeros(0, model.class_count)
    probs = torch.softmax(logits.double(), dim=1)
    pred = probs.argmax(dim=1).numpy()
    probs = probs.numpy()
    return ForwardResult(
        logits=logits.numpy(),
        probabilities=probs.astype(np.float32),
        predicted=pred,
        score=probs[np.arange(len(pred)), pred],
        taps={t: np.concatenate(v) if v else np.zeros((0, model.tap_infos[t].width), np.float32)
              for t, v in taps.items()},
    )


def predict(model: NetworkModel, x, batch_size: int = 1024):
    """(predicted class, softmax score of that class) per sample."""
    res = forward(model, x, (), batch_size)
    return res.predicted, res.score


@dataclass(frozen=True)
class CrossEntropyLoss:
    """Cross-entropy against ``labels`` (one per sample)."""

    labels: object


@dataclass(frozen=True)
class SignatureLossSpec:
    """Hinge penalty for activations outside per-class ranges.

    ``lower``/``upper`` map tap id -> (N, width) bounds, one row per sample.
    """

    lower: dict
    upper: dict


def signature_loss_terms(recorded: dict, lower: dict, upper: dict) -> torch.Tensor:
    total = 0
    for t, v in recorded.items():
        lo = torch.as_tensor(lower[t])
        hi = torch.as_tensor(upper[t])
        total = total + (F.relu(v - hi) + F.relu(lo - v)).sum(dim=1)
    return total


def input_gradient(model: NetworkModel, x, loss_spec, reduce: bool = False):
    """Gradient of the per-sample loss with respect to the input pixels.

    Returns an array shaped like ``x``. Losses are summed over the batch, so each
    sample's gradient is that of its own loss. With ``reduce=True`` also returns
    the per-sample loss values.
    """
    x_arr = np.asarray(x, dtype=np.float32)
    xb = _as_batch(x_arr).clone().requires_grad_(True)
    if isinstance(loss_spec, CrossEntropyLoss):
        labels = np.atleast_1d(np.asarray(loss_spec.labels, dtype=np.int64))
        if labels.shape[0] != xb.shape[0]:
            raise LabelError("one label per sample required")
        if (labels < 0).any() or (labels >= model.class_count).any():
            raise LabelError(f"labels must lie in [0, {model.class_count})")
        logits, _ = model.net(xb)
        losses = F.cross_entropy(logits, torch.from_numpy(labels), reduction="none")
    elif isinstance(loss_spec, SignatureLossSpec):
        _, rec = model.net(xb, frozenset(loss_spec.lower))
        losses = signature_loss_terms(rec, loss_spec.lower, loss_spec.upper)
        if not torch.is_tensor(losses):
            losses = torch.zeros(xb.shape[0])
    else:
        raise TypeError(f"unsupported loss spec {type(loss_spec).__name__}")
    if losses.requires_grad:
        (grad,) = torch.autograd.grad(losses.sum(), xb)
    else:
        grad = torch.zeros_like(xb)
    grad = grad.numpy().reshape(x_arr.shape)
    if reduce:
        return grad, losses.detach().double().numpy()
    return grad


def train(model: NetworkModel, images, labels, cfg: TrainConfig, progress=None) -> NetworkModel:
    """Adam + cross-entropy. Deterministic for a fixed seed in single-threaded mode."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    xs = _as_batch(images)
    ys = torch.from_numpy(labels)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    model.net.train()
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(xs)))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            logits, _ = model.net(xs[idx])
            loss = F.cross_entropy(logits, ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("epoch %d/%d mean loss %.4f", epoch + 1, cfg.epochs, total / len(xs))
        if progress:
            progress(epoch, total / len(xs))
    model.net.eval()
    return model


def evaluate_accuracy(model: NetworkModel, images, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    pred, _ = predict(model, images)
    return float(np.mean(pred == labels))
