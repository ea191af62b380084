"""Experiment configuration: INI files with one section per stage.

Attack sections are named ``[attack <row label>]`` and keep their file order,
which is also the row order of the detection report.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from .attacks import AttackConfig
from .cams import CamSpec
from .nn import TrainConfig

BUNDLED = ("mnist", "fmnist")
_ATTACK_KEYS = {"eps": float, "alpha": float, "k": int, "gamma": float, "wrong_score": float, "c": float,
                "kappa": float, "lr": float, "stop_score": float}


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _taps(text):
    taps = tuple(sorted(int(v) for v in text.split(",") if v.strip()))
    if not taps:
        raise ValueError("tap subset must be non-empty")
    return taps


def _cams(text):
    return tuple(CamSpec.parse(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class AttackEntry:
    name: str
    attack: AttackConfig
    calibration: int
    evaluation: int
    source: str = "test"  # test: trusted test set; train: training split

    def __post_init__(self):
        if self.calibration < 0 or self.evaluation < 0:
            raise ValueError(f"{self.name}: counts must be >= 0")


@dataclass(frozen=True)
class AdaptiveConfig:
    gammas: tuple = (0.0, 0.25, 0.5, 0.75)
    recalibration_gammas: tuple = (0.25, 0.75)
    recalibration_samples: int = 800
    test_samples: int = 2000
    eps: float = 0.1
    alpha: float = 0.004
    k: int = 40
    cams: tuple = (CamSpec("src"), CamSpec("mrc", 16), CamSpec("mrc", 32))


@dataclass(frozen=True)
class BenchConfig:
    inferences: int = 1000
    warmup: int = 50
    installations: tuple = ((1,), (1, 2), (1, 2, 3), (2, 3), (3,))
    cams: tuple = (CamSpec("src"), CamSpec("mrc", 16), CamSpec("mrc", 32), CamSpec("nrc"), CamSpec("knnc"))
    knnc_inferences: int = 100  # exact search over the full trusted set is ~1 s per inference on one core


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    seed: int = 0
    taps: tuple = (1, 2, 3)
    cams: tuple = (CamSpec("src"),)
    baselines: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    score_threshold: float = 0.9
    test_cap: int = 9000
    safe_calibration: int = 4500
    safe_evaluation: int = 4500
    attacks: tuple = ()
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    sweep_eps: tuple = (0, 0.01, 0.02, 0.05, 0.08, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def attack(self, name) -> AttackEntry:
        for a in self.attacks:
            if a.name == name:
                return a
        raise KeyError(name)

    # content keys for the stage cache
    def key(self, *parts) -> str:
        blob = json.dumps([_plain(p) for p in parts], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def model_key(self):
        return self.key("model", self.dataset, asdict(self.train))

    @property
    def trusted_key(self):
        return self.key("trusted", self.model_key, self.score_threshold, self.test_cap)


def _plain(x):
    if hasattr(x, "__dataclass_fields__"):
        return asdict(x)
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _attack_entry(name, sec, seed) -> AttackEntry:
    kw = {k: conv(sec[k]) for k, conv in _ATTACK_KEYS.items() if k in sec}
    if "target" in sec:
        kw["target"] = int(sec["target"])
    if "patch" in sec:
        kw["patch"] = tuple(int(v) for v in sec["patch"].split(","))
    if "random_start" in sec:
        kw["random_start"] = sec.getboolean("random_start")
    cfg = AttackConfig(sec["method"], seed=sec.getint("seed", seed), **kw)
    return AttackEntry(name, cfg, sec.getint("calibration", 0), sec.getint("evaluation", 0), sec.get("source", "test"))


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    ex = cp["experiment"]
    seed = ex.getint("seed", 0)
    tr = cp["train"] if "train" in cp else {}
    train = TrainConfig(epochs=int(tr.get("epochs", 8)), batch_size=int(tr.get("batch_size", 64)),
                        lr=float(tr.get("lr", 1e-3)), beta1=float(tr.get("beta1", 0.9)),
                        beta2=float(tr.get("beta2", 0.999)), eps=float(tr.get("eps", 1e-8)), seed=seed)
    ts = cp["trusted"] if "trusted" in cp else cp["DEFAULT"]
    attacks = tuple(_attack_entry(s.split(None, 1)[1], cp[s], seed) for s in cp.sections() if s.startswith("attack "))
    kw = {}
    if "adaptive" in cp:
        a = cp["adaptive"]
        d = AdaptiveConfig()
        kw["adaptive"] = AdaptiveConfig(
            _floats(a.get("gammas", "0,0.25,0.5,0.75")), _floats(a.get("recalibration_gammas", "0.25,0.75")),
            a.getint("recalibration_samples", d.recalibration_samples), a.getint("test_samples", d.test_samples),
            a.getfloat("eps", d.eps), a.getfloat("alpha", d.alpha), a.getint("k", d.k),
            _cams(a["cams"]) if "cams" in a else d.cams)
    if "sweep" in cp:
        kw["sweep_eps"] = _floats(cp["sweep"]["eps"])
    if "bench" in cp:
        b = cp["bench"]
        d = BenchConfig()
        kw["bench"] = BenchConfig(
            b.getint("inferences", d.inferences), b.getint("warmup", d.warmup),
            tuple(_taps(s) for s in b["installations"].split(";")) if "installations" in b else d.installations,
            _cams(b["cams"]) if "cams" in b else d.cams, b.getint("knnc_inferences", d.knnc_inferences))
    return ExperimentConfig(
        dataset=ex["dataset"], seed=seed, taps=_taps(ex.get("taps", "1,2,3")), cams=_cams(ex.get("cams", "src")),
        baselines=ex.getboolean("baselines", True), train=train,
        score_threshold=float(ts.get("score_threshold", 0.9)), test_cap=int(ts.get("test_cap", 9000)),
        safe_calibration=int(ts.get("safe_calibration", 4500)), safe_evaluation=int(ts.get("safe_evaluation", 4500)),
        attacks=attacks, **kw)


def load_config(path_or_name) -> ExperimentConfig:
    """A path to an INI file, or the name of a bundled config (``mnist``, ``fmnist``)."""
    if str(path_or_name) in BUNDLED:
        return parse_config(resources.files("covmon").joinpath(f"configs/{path_or_name}.ini").read_text())
    return parse_config(Path(path_or_name).read_text())
