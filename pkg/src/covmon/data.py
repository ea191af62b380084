"""MNIST / Fashion-MNIST loading and trusted-set selection."""

from __future__ import annotations

import configparser
import gzip
import hashlib
import io
import json
import logging
import os
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import nn

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CACHE_ENV = "COVMON_CACHE"


class IdxParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FetchError(RuntimeError):
    pass


class ChecksumError(FetchError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX container. Unsigned-byte image payloads are scaled to [0, 1]."""
    if len(data) < 4:
        raise IdxParseError("truncated magic", len(data))
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise IdxParseError(f"bad magic 0x{int.from_bytes(data[:4], 'big'):08x}", 0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxParseError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header_end < need:
        raise IdxParseError(f"truncated payload: need {need} bytes, have {len(data) - header_end}", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)
    if dtype_code == 0x08 and ndim >= 3:
        return arr.astype(np.float32) / np.float32(255.0)
    return arr.copy()


def encode_idx(arr: np.ndarray) -> bytes:
    """Inverse of ``parse_idx`` for uint8 arrays (raw bytes, no scaling)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    head = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    provenance: str

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], self.provenance)


def load_dataset_config(path=None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is None:
        cp.read_string(resources.files("covmon").joinpath("configs/datasets.ini").read_text())
    else:
        cp.read(path)
    return cp


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "covmon"))


def _http_get(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=120) as resp:
        return resp.read()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _quarantine(path: Path):
    bad = path.with_name(path.name + ".quarantined")
    os.replace(path, bad)
    log.warning("checksum mismatch, moved %s to %s", path, bad)


def _extract_idx_tarball(blob: bytes, section) -> dict[str, bytes]:
    out = {}
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:*") as tar:
        for name in (n for pair in SPLIT_FILES.values() for n in pair):
            raw = tar.extractfile(section[f"member.{name}"]).read()
            out[name] = gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw
    return out


def _extract_json_per_class(blob: bytes, section) -> dict[str, bytes]:
    """Per-class JSON pixel lists -> IDX files.

    Each class list holds the train images followed by the test images; the
    first ``train_per_class`` go to train, the next ``test_per_class`` to test.
    Classes are interleaved (sample 0 of every class, then sample 1, ...) so
    prefixes stay class-balanced.
    """
    n_train, n_test = int(section["train_per_class"]), int(section["test_per_class"])
    classes = int(section["classes"])
    per_class = []
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:*") as tar:
        for c in range(classes):
            member = section["member_pattern"].format(c=c)
            rows = [r for r in json.load(tar.extractfile(member))["data"] if len(r) == 784]
            if len(rows) < n_train + n_test:
                raise FetchError(f"class {c}: {len(rows)} images, need {n_train + n_test}")
            per_class.append(np.asarray(rows[:n_train + n_test], dtype=np.uint8).reshape(-1, 28, 28))
    out = {}
    for split, (lo, hi) in {"train": (0, n_train), "test": (n_train, n_train + n_test)}.items():
        imgs = np.stack([pc[lo:hi] for pc in per_class], axis=1).reshape(-1, 28, 28)
        labs = np.tile(np.arange(classes, dtype=np.uint8), hi - lo)
        img_name, lab_name = SPLIT_FILES[split]
        out[img_name] = encode_idx(imgs)
        out[lab_name] = encode_idx(labs)
    return out


_EXTRACTORS = {"idx-tarball": _extract_idx_tarball, "json-per-class": _extract_json_per_class}


def fetch_dataset(name: str, cache_dir=None, transport=None, config=None):
    """Return ``(train, test)`` splits, downloading into ``<cache>/<name>/`` if needed.

    ``transport(url) -> bytes`` is injectable; on a complete, checksum-valid
    cache it is never called.
    """
    config = config or load_dataset_config()
    if name not in config:
        raise KeyError(f"unknown dataset {name!r}")
    section = config[name]
    root = Path(cache_dir or default_cache_dir()) / name
    files = [n for pair in SPLIT_FILES.values() for n in pair]

    def cached_ok():
        ok = True
        for f in files:
            p = root / f
            if not p.exists():
                ok = False
                continue
            want = section.get(f"sha256.{f}")
            if want and _sha256(p.read_bytes()) != want:
                _quarantine(p)
                ok = False
        return ok

    if not cached_ok():
        transport = transport or _http_get
        url = section["archive_url"]
        log.info("downloading %s", url)
        try:
            blob = transport(url)
        except Exception as exc:
            raise FetchError(f"download of {url} failed: {exc}") from exc
        size = section.getint("archive_size", fallback=None)
        if size is not None and len(blob) != size:
            raise ChecksumError(f"{url}: expected {size} bytes, got {len(blob)}")
        if _sha256(blob) != section["archive_sha256"]:
            raise ChecksumError(f"{url}: archive checksum mismatch")
        extracted = _EXTRACTORS[section["layout"]](blob, section)
        root.mkdir(parents=True, exist_ok=True)
        for fname, payload in extracted.items():
            want = section.get(f"sha256.{fname}")
            if want and _sha256(payload) != want:
                raise ChecksumError(f"{name}/{fname}: extracted file checksum mismatch")
            tmp = root / (fname + ".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, root / fname)

    splits = []
    for split, (img_name, lab_name) in SPLIT_FILES.items():
        images = parse_idx((root / img_name).read_bytes())
        labels = parse_idx((root / lab_name).read_bytes()).astype(np.int64)
        if len(images) != len(labels):
            raise FetchError(f"{name}/{split}: {len(images)} images vs {len(labels)} labels")
        splits.append(DatasetSplit(images, labels, split))
    return tuple(splits)


@dataclass
class TrustedSet:
    """Correct, high-score samples, partitioned by true class."""

    images: np.ndarray
    labels: np.ndarray
    source_index: np.ndarray  # positions in the originating split
    class_count: int
    score_threshold: float
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def partition(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    @property
    def partitions(self) -> dict[int, np.ndarray]:
        return {c: self.partition(c) for c in range(self.class_count)}


def _select(model, split: DatasetSplit, score_threshold: float) -> np.ndarray:
    pred, score = nn.predict(model, split.images)
    return np.flatnonzero((pred == split.labels) & (score > score_threshold))


def select_trusted(model, split: DatasetSplit, score_threshold: float = 0.9) -> TrustedSet:
    keep = _select(model, split, score_threshold)
    ts = TrustedSet(split.images[keep], split.labels[keep], keep, model.class_count, score_threshold)
    for c in range(model.class_count):
        if not np.any(ts.labels == c):
            msg = f"class {c} has no trusted samples"
            log.warning(msg)
            ts.warnings.append(msg)
    return ts


def select_trusted_test(model, split: DatasetSplit, score_threshold: float = 0.9, cap: int = 9000) -> TrustedSet:
    """As ``select_trusted``; keeps the first ``cap`` selected samples in file order."""
    keep = _select(model, split, score_threshold)
    if len(keep) > cap:
        keep = keep[:cap]
    return TrustedSet(split.images[keep], split.labels[keep], keep, model.class_count, score_threshold)


def filter_wrong_high_score(model, images, labels, wrong_score_threshold: float) -> np.ndarray:
    """Indices of samples predicted as a wrong class with score above the threshold."""
    if len(labels) == 0:
        return np.zeros(0, dtype=np.int64)
    pred, score = nn.predict(model, images)
    return np.flatnonzero((pred != np.asarray(labels)) & (score > wrong_score_threshold))
