"""Flat binary container for signatures, thresholds and model weights.

Layout (all integers little-endian)::

    0       4   magic b"CVSG"
    4       4   u32 format version
    8       8   u64 manifest length L
    16      L   manifest, UTF-8 JSON
    ...         zero padding to a 64-byte boundary (data start)
    ...         blocks, each starting on a 64-byte boundary relative to data start
    end-32  32  SHA-256 of every preceding byte

The manifest lists each block's name, dtype, shape, offset (from data start)
and byte count. Per-tap signature blocks hold exactly the analytic payload:

    SRC   (m, 2, w)    float32   [vmin, vmax]
    MRC   (m, 2+Q, w)  float32   [vmin, vmax, lambda_1..lambda_Q]
    NRC   (m, w)       float32   top-P frequencies
    kNNC  (R, w)       float32   trusted rows, class-sorted; labels in block "labels"

See docs/container_format.md for the field-by-field description.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cams, nn
from .calibrate import ThresholdSet

MAGIC = b"CVSG"
VERSION = 1
ALIGN = 64
_HEAD = struct.Struct("<4sIQ")
_DIGEST = 32
_CHUNK = 1 << 24


class StoreError(ValueError):
    pass


class BadMagicError(StoreError):
    pass


class VersionError(StoreError):
    def __init__(self, found, supported=VERSION):
        super().__init__(f"container version {found} not supported (this build reads version {supported})")
        self.found, self.supported = found, supported


class ChecksumError(StoreError):
    pass


@dataclass
class Block:
    name: str
    dtype: str
    shape: tuple
    chunks: object  # iterable of arrays, concatenated along axis 0

    @property
    def nbytes(self):
        return int(np.prod(self.shape)) * np.dtype(self.dtype).itemsize


def _array_block(name, arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return Block(name, dt.str, arr.shape, [arr])


def _pad(n):
    return (-n) % ALIGN


def _layout(blocks):
    offsets, pos = [], 0
    for b in blocks:
        offsets.append(pos)
        pos += b.nbytes + _pad(b.nbytes)
    return offsets


def _write_container(path, manifest: dict, blocks: list[Block]) -> int:
    path = Path(path)
    offsets = _layout(blocks)
    manifest = dict(manifest, blocks=[
        {"name": b.name, "dtype": b.dtype, "shape": list(b.shape), "offset": o, "nbytes": b.nbytes}
        for b, o in zip(blocks, offsets)])
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    head = _HEAD.pack(MAGIC, VERSION, len(text)) + text
    head += b"\0" * _pad(len(head))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    h = hashlib.sha256()
    try:
        with os.fdopen(fd, "wb") as f:
            def put(buf):
                h.update(buf)
                f.write(buf)

            put(head)
            for b in blocks:
                written = 0
                for chunk in b.chunks:
                    buf = memoryview(np.ascontiguousarray(chunk, dtype=b.dtype)).cast("B")
                    put(buf)
                    written += len(buf)
                if written != b.nbytes:
                    raise StoreError(f"block {b.name}: wrote {written} bytes, declared {b.nbytes}")
                put(b"\0" * _pad(b.nbytes))
            f.write(h.digest())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path.stat().st_size


@dataclass
class Container:
    path: Path
    version: int
    manifest: dict
    data_start: int

    def block_info(self, name):
        for b in self.manifest["blocks"]:
            if b["name"] == name:
                return b
        raise StoreError(f"missing block {name!r}")

    def array(self, name, mmap=False):
        b = self.block_info(name)
        shape = tuple(b["shape"])
        if mmap and b["nbytes"]:
            return np.memmap(self.path, dtype=b["dtype"], mode="r", offset=self.data_start + b["offset"], shape=shape)
        with open(self.path, "rb") as f:
            f.seek(self.data_start + b["offset"])
            raw = f.read(b["nbytes"])
        return np.frombuffer(raw, dtype=b["dtype"]).reshape(shape).copy()

    def has(self, name):
        return any(b["name"] == name for b in self.manifest["blocks"])


def open_container(path, verify=True) -> Container:
    """Parse and validate a container: magic, then version, then checksum."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_HEAD.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
        if len(head) < _HEAD.size or size < _HEAD.size + _DIGEST:
            raise ChecksumError(f"{path}: truncated container ({size} bytes)")
        _, version, mlen = _HEAD.unpack(head)
        if version != VERSION:
            raise VersionError(version)
        if verify:
            h = hashlib.sha256()
            f.seek(0)
            remaining = size - _DIGEST
            while remaining:
                buf = f.read(min(_CHUNK, remaining))
                if not buf:
                    break
                h.update(buf)
                remaining -= len(buf)
            if remaining or f.read(_DIGEST) != h.digest():
                raise ChecksumError(f"{path}: checksum mismatch")
        f.seek(_HEAD.size)
        text = f.read(mlen)
    if len(text) != mlen:
        raise ChecksumError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(text)
    except ValueError as exc:
        raise StoreError(f"{path}: unreadable manifest: {exc}") from exc
    data_start = _HEAD.size + mlen + _pad(_HEAD.size + mlen)
    blocks = manifest.get("blocks", [])
    end = max((data_start + b["offset"] + b["nbytes"] for b in blocks), default=data_start)
    if end > size - _DIGEST:
        raise StoreError(f"{path}: blocks extend past end of file")
    for b in blocks:
        if int(np.prod(b["shape"])) * np.dtype(b["dtype"]).itemsize != b["nbytes"]:
            raise StoreError(f"{path}: block {b['name']} size does not match its shape")
    return Container(path, version, manifest, data_start)


# ----------------------------------------------------------------- signatures

def tap_payload_bytes(cam: str, width: int, class_count: int, Q: int = 0, rows: int = 0) -> int:
    """Analytic per-tap payload size."""
    if cam == "src":
        return class_count * width * 2 * 4
    if cam == "mrc":
        return class_count * width * (2 + Q) * 4
    if cam == "nrc":
        return class_count * width * 4
    if cam == "knnc":
        return rows * width * 4
    raise ValueError(f"unknown CAM {cam!r}")


def fingerprint(sig) -> str:
    desc = {"cam": sig.cam, "params": sig.params, "class_count": sig.class_count,
            "taps": [[t.tap_id, t.width, t.channels] for t in sig.taps], "counts": [int(c) for c in sig.counts]}
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def _tap_block(sig, t):
    tid = t.tap_id
    if sig.cam == "src":
        return _array_block(f"tap{tid}", np.stack([sig.vmin[tid], sig.vmax[tid]], axis=1).astype(np.float32))
    if sig.cam == "mrc":
        arr = np.concatenate([sig.vmin[tid][:, None], sig.vmax[tid][:, None], sig.lam[tid]], axis=1)
        return _array_block(f"tap{tid}", arr.astype(np.float32))
    if sig.cam == "nrc":
        return _array_block(f"tap{tid}", sig.lam[tid].astype(np.float32))
    rows = sig.rows[tid]
    return Block(f"tap{tid}", "<f4", rows.shape, (rows[i:i + 8192] for i in range(0, len(rows), 8192)))


def _sig_manifest(sig, rows=None):
    m = {"kind": "signature", "cam": sig.cam, "params": sig.params, "class_count": sig.class_count,
         "taps": [[t.tap_id, t.width, t.channels] for t in sig.taps],
         "counts": [int(c) for c in sig.counts], "fingerprint": fingerprint(sig)}
    if rows is not None:
        m["rows"] = rows
    return m


def _threshold_parts(thresholds: ThresholdSet | None):
    if thresholds is None:
        return {}, []
    meta = {"cam": thresholds.cam, "sense": thresholds.sense, "fingerprint": thresholds.fingerprint}
    return {"thresholds": meta}, [
        _array_block("thresholds.tau", thresholds.tau),
        _array_block("thresholds.youden", thresholds.youden),
        _array_block("thresholds.fallback", thresholds.fallback.astype(np.uint8)),
    ]


def write_signature(sig, path, thresholds: ThresholdSet | None = None) -> int:
    """Write a finished signature (and optional thresholds); returns the file size."""
    if thresholds is not None and len(thresholds.tau) != sig.class_count:
        raise StoreError("threshold count differs from class count")
    rows = len(sig.labels) if sig.cam == "knnc" else None
    extra, tblocks = _threshold_parts(thresholds)
    blocks = [_tap_block(sig, t) for t in sig.taps]
    if sig.cam == "knnc":
        blocks.append(_array_block("labels", np.asarray(sig.labels, "<i4")))
    return _write_container(path, dict(_sig_manifest(sig, rows), **extra), blocks + tblocks)


def write_knnc_streaming(path, model, images, labels, taps, G=cams.DEFAULT_G, batch_size=1000,
                         thresholds: ThresholdSet | None = None) -> int:
    """Build a kNNC signature straight to disk, one forward pass per tap.

    Rows never need to fit in memory together; the file matches what
    ``write_signature(aggregate_knnc(...))`` would produce.
    """
    labels = np.asarray(labels, np.int64)
    order = np.argsort(labels, kind="stable")
    infos = cams._resolve_taps(model, taps)
    counts = np.bincount(labels, minlength=model.class_count).astype(np.int64)
    stub = cams.KnncSignature(infos, model.class_count, {}, labels[order], counts, G)

    def rows_of(t):
        for i in range(0, len(order), batch_size):
            yield nn.forward(model, images[order[i:i + batch_size]], [t.tap_id]).taps[t.tap_id]

    blocks = [Block(f"tap{t.tap_id}", "<f4", (len(order), t.width), rows_of(t)) for t in infos]
    blocks.append(_array_block("labels", labels[order].astype("<i4")))
    extra, tblocks = _threshold_parts(thresholds)
    return _write_container(path, dict(_sig_manifest(stub, len(order)), **extra), blocks + tblocks)


def read_signature(path, mmap=False, verify=True):
    """Return ``(signature, thresholds or None)``.

    ``mmap=True`` memory-maps kNNC rows read-only instead of loading them.
    """
    c = open_container(path, verify)
    m = c.manifest
    if m.get("kind") != "signature":
        raise StoreError(f"{path}: not a signature container")
    taps = tuple(nn.TapInfo(*t) for t in m["taps"])
    mc, cam = m["class_count"], m["cam"]
    counts = np.asarray(m["counts"], np.int64)
    for t in taps:
        b = c.block_info(f"tap{t.tap_id}")
        want = tap_payload_bytes(cam, t.width, mc, m["params"].get("Q", 0), m.get("rows", 0))
        if b["nbytes"] != want:
            raise StoreError(f"{path}: tap {t.tap_id} payload is {b['nbytes']} bytes, layout implies {want}")
    arrs = {t.tap_id: c.array(f"tap{t.tap_id}", mmap=mmap and cam == "knnc") for t in taps}
    if cam == "src":
        sig = cams.SrcSignature(taps, mc, {k: a[:, 0].copy() for k, a in arrs.items()},
                                {k: a[:, 1].copy() for k, a in arrs.items()}, counts)
    elif cam == "mrc":
        sig = cams.MrcSignature(taps, mc, m["params"]["Q"], {k: a[:, 0].copy() for k, a in arrs.items()},
                                {k: a[:, 1].copy() for k, a in arrs.items()},
                                {k: a[:, 2:].copy() for k, a in arrs.items()}, counts)
    elif cam == "nrc":
        sig = cams.NrcSignature(taps, mc, m["params"]["P"], arrs, counts)
    elif cam == "knnc":
        sig = cams.KnncSignature(taps, mc, arrs, c.array("labels").astype(np.int64), counts, m["params"]["G"])
    else:
        raise StoreError(f"{path}: unknown CAM {cam!r}")
    thresholds = None
    if "thresholds" in m:
        t = m["thresholds"]
        thresholds = ThresholdSet(c.array("thresholds.tau"), t["cam"], t["fingerprint"], t["sense"],
                                  c.array("thresholds.youden"), c.array("thresholds.fallback").astype(bool))
    return sig, thresholds


def tap_payloads(path) -> dict[int, int]:
    """Measured per-tap payload bytes of a signature file."""
    c = open_container(path, verify=False)
    return {t[0]: c.block_info(f"tap{t[0]}")["nbytes"] for t in c.manifest["taps"]}


# ---------------------------------------------------------------------- model

def write_model(model: nn.NetworkModel, path, meta: dict | None = None) -> int:
    state = model.state_arrays()
    manifest = {"kind": "model", "class_count": model.class_count,
                "layers": [{"kind": s.kind, "params": s.params} for s in model.layers], "meta": meta or {}}
    return _write_container(path, manifest, [_array_block(f"model/{k}", v.astype("<f4")) for k, v in state.items()])


def read_model(path) -> nn.NetworkModel:
    c = open_container(path)
    m = c.manifest
    if m.get("kind") != "model":
        raise StoreError(f"{path}: not a model container")
    model = nn.NetworkModel([nn.LayerSpec(l["kind"], l["params"]) for l in m["layers"]], m["class_count"])
    model.load_state_arrays({b["name"][len("model/"):]: c.array(b["name"]) for b in m["blocks"]})
    return model


def model_meta(path) -> dict:
    return open_container(path).manifest.get("meta", {})
