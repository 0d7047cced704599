"""Checkpoint files: parameters, anchors and RNG state, bit-exact on reload.

Binary layout (little endian)::

    0   8 bytes   magic b"EWCLABCK"
    8   u32       format version
    12  u64       header length H
    20  H bytes   JSON header (metadata + array table)
    20+H u32      CRC32 of the header bytes
    24+H ...      raw float64 arrays, row-major, at the offsets in the table

Every array entry carries its own CRC32, so corruption is reported with the
byte offset of the damaged region. The JSON variant stores the same content
with floats written by ``repr`` (round-trip exact) plus a SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LayoutEntry, ParamVector
from .ewc import PenaltyLedger, TaskAnchor
from .fisher import FisherEstimate

FORMAT_VERSION = 1
MAGIC = b"EWCLABCK"
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    architecture: dict
    params: ParamVector
    ledger: PenaltyLedger
    rng_state: dict | None = None
    tasks_done: int = 0
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.architecture, self.rng_state, self.tasks_done, self.provenance, self.format_version) != \
                (other.architecture, other.rng_state, other.tasks_done, other.provenance, other.format_version):
            return False
        if self.params != other.params or len(self.ledger) != len(other.ledger):
            return False
        return all(a.task_id == b.task_id and a.lam == b.lam and a.theta_star == b.theta_star
                   and a.fisher == b.fisher for a, b in zip(self.ledger, other.ledger))


def _layout_table(layout) -> list:
    return [[e.name, list(e.shape), e.offset] for e in layout]


def _layout_from(table) -> tuple[LayoutEntry, ...]:
    return tuple(LayoutEntry(name, tuple(shape), offset) for name, shape, offset in table)


def _describe(ckpt: Checkpoint) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    arrays = [("params", ckpt.params.values)]
    anchors = []
    for i, a in enumerate(ckpt.ledger):
        anchors.append({"task_id": a.task_id, "lambda": a.lam, "fisher_kind": a.fisher.kind,
                        "fisher_source": a.fisher.source, "fisher_sample_count": a.fisher.sample_count})
        arrays.append((f"anchor{i}.theta_star", a.theta_star.values))
        arrays.append((f"anchor{i}.fisher", a.fisher.values))
    meta = {
        "format_version": ckpt.format_version,
        "architecture": ckpt.architecture,
        "layout": _layout_table(ckpt.params.layout),
        "anchors": anchors,
        "rng_state": ckpt.rng_state,
        "tasks_done": ckpt.tasks_done,
        "provenance": ckpt.provenance,
    }
    return meta, arrays


def _assemble(meta: dict, arrays: dict[str, np.ndarray]) -> Checkpoint:
    layout = _layout_from(meta["layout"])
    P = sum(e.size for e in layout)

    def get(name, shape):
        a = arrays[name]
        if a.size != int(np.prod(shape)):
            raise CheckpointError(f"array {name} has {a.size} values, expected shape {shape}")
        return a.reshape(shape)

    params = ParamVector(get("params", (P,)), layout)
    ledger = PenaltyLedger()
    for i, a in enumerate(meta["anchors"]):
        shape = (P,) if a["fisher_kind"] == "diagonal" else (P, P)
        F = FisherEstimate(a["fisher_kind"], get(f"anchor{i}.fisher", shape),
                           a["fisher_sample_count"], a["fisher_source"], layout)
        ledger.add(TaskAnchor(a["task_id"], ParamVector(get(f"anchor{i}.theta_star", (P,)), layout),
                              F, a["lambda"]))
    return Checkpoint(meta["architecture"], params, ledger, meta["rng_state"], meta["tasks_done"],
                      meta["provenance"], meta["format_version"])


def _check_version(v) -> None:
    if v != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {v} is not supported (expected {FORMAT_VERSION})")


# -- binary --------------------------------------------------------------------

def to_bytes(ckpt: Checkpoint) -> bytes:
    meta, arrays = _describe(ckpt)
    table, blobs, off = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        table.append({"name": name, "offset": off, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        off += len(raw)
    meta["arrays"] = table
    header = json.dumps(meta, sort_keys=True).encode()
    return b"".join([_PREFIX.pack(MAGIC, ckpt.format_version, len(header)), header,
                     struct.pack("<I", zlib.crc32(header)), *blobs])


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise IntegrityError("file shorter than the fixed prefix", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise IntegrityError("bad magic bytes", 0)
    _check_version(version)
    start = _PREFIX.size
    if start + hlen + 4 > len(buf):
        raise IntegrityError("header truncated", len(buf))
    header = buf[start:start + hlen]
    (crc,) = struct.unpack_from("<I", buf, start + hlen)
    if zlib.crc32(header) != crc:
        raise IntegrityError("header checksum mismatch", start)
    meta = json.loads(header)
    data0 = start + hlen + 4
    arrays = {}
    for entry in meta.pop("arrays"):
        lo = data0 + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(buf):
            raise IntegrityError(f"array {entry['name']} truncated", len(buf))
        raw = buf[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise IntegrityError(f"array {entry['name']} checksum mismatch", lo)
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if meta.get("format_version") != version:
        raise IntegrityError("header and prefix disagree on version", 8)
    return _assemble(meta, arrays)


# -- json ----------------------------------------------------------------------

def to_json(ckpt: Checkpoint) -> str:
    meta, arrays = _describe(ckpt)
    meta["arrays"] = {name: a.reshape(-1).tolist() for name, a in arrays}
    body = json.dumps(meta, sort_keys=True)
    digest = hashlib.sha256(body.encode()).hexdigest()
    return json.dumps({"ewc_lab_checkpoint": meta, "sha256": digest}, sort_keys=True)


def from_json(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"malformed checkpoint JSON: {exc.msg}", exc.pos) from None
    if not isinstance(doc, dict) or "ewc_lab_checkpoint" not in doc:
        raise IntegrityError("not a checkpoint document", 0)
    meta = doc["ewc_lab_checkpoint"]
    _check_version(meta.get("format_version"))
    if hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest() != doc.get("sha256"):
        raise IntegrityError("checkpoint digest mismatch", 0)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in meta.pop("arrays").items()}
    return _assemble(meta, arrays)


def save_checkpoint(path, ckpt: Checkpoint, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "bin")
    if fmt == "json":
        path.write_text(to_json(ckpt))
    elif fmt == "bin":
        path.write_bytes(to_bytes(ckpt))
    else:
        raise ValueError(f"unknown checkpoint format {fmt!r}")
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] == MAGIC:
        return from_bytes(data)
    if data[:1] == b"{":
        return from_json(data.decode())
    return from_bytes(data)
