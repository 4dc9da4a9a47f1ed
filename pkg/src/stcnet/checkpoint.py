"""Binary checkpoint format.

Layout (little-endian throughout)::

    magic b"STCN" | version u32 (= 1)
    manifest: u32 entry count, then per entry
        name (u32 length + UTF-8) | group (u32 length + UTF-8)
        dtype code u8 | rank u8 | dims rank x u64
        payload offset u64 | nbytes u64
    config digest (u32 length + UTF-8)
    config JSON (u32 length + UTF-8)
    extra JSON (u32 length + UTF-8)
    payload: raw tensor bytes, offsets relative to the payload start

Groups are free-form labels; the trainer uses ``backbone``, ``stc``,
``head``, ``teacher``, ``buffers`` and ``optimizer``.
Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CompatibilityError, FormatError

MAGIC = b"STCN"
VERSION = 1
DTYPE_CODES = {"float32": 0, "float64": 1, "int64": 2, "int32": 3, "uint8": 4, "uint64": 5, "bool": 6}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    tensors: dict  # name -> ndarray
    groups: dict  # name -> group label
    config: dict = field(default_factory=dict)
    digest: str = ""
    extra: dict = field(default_factory=dict)

    def group(self, label: str) -> dict:
        return {k: v for k, v in self.tensors.items() if self.groups[k] == label}


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    manifest = [struct.pack("<I", len(ckpt.tensors))]
    payload = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in DTYPE_CODES:
            raise FormatError(f"tensor {name!r}: unsupported dtype {key}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        manifest.append(_pack_str(name) + _pack_str(ckpt.groups.get(name, "")))
        manifest.append(struct.pack("<BB", DTYPE_CODES[key], arr.ndim))
        manifest.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        manifest.append(struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    digest = ckpt.digest or config_digest(ckpt.config)
    head = [MAGIC, struct.pack("<I", VERSION), *manifest, _pack_str(digest),
            _pack_str(json.dumps(ckpt.config, sort_keys=True, default=str)),
            _pack_str(json.dumps(ckpt.extra, sort_keys=True))]
    return b"".join(head + payload)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what}", self.pos)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: {what} is not valid UTF-8", start) from None


def decode(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    (count,) = r.unpack("<I", "manifest count")
    entries = []
    for _ in range(count):
        name = r.string("tensor name")
        group = r.string("group name")
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in CODE_DTYPES:
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {code}", r.pos - 2)
        dims = r.unpack(f"<{rank}Q", "dims")
        offset, nbytes = r.unpack("<QQ", "payload extent")
        entries.append((name, group, CODE_DTYPES[code], dims, offset, nbytes))
    digest = r.string("digest")
    try:
        config = json.loads(r.string("config"))
        extra = json.loads(r.string("extra"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt JSON block ({exc.msg})", r.pos) from None
    base = r.pos
    tensors, groups = {}, {}
    for name, group, dtype, dims, offset, nbytes in entries:
        dt = np.dtype(dtype).newbyteorder("<")
        if nbytes != dt.itemsize * int(np.prod(dims, dtype=np.int64)):
            raise FormatError(f"{path}: tensor {name!r} byte count disagrees with dims {dims}", base + offset)
        end = base + offset + nbytes
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload for tensor {name!r}", len(raw))
        tensors[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=base + offset) \
            .reshape(dims).astype(dtype)
        groups[name] = group
    return Checkpoint(tensors, groups, config, digest, extra)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_digest: Optional[str] = None, strict: bool = True) -> Checkpoint:
    """Read a checkpoint; with ``strict`` a digest other than ``expect_digest`` is refused."""
    ckpt = decode(Path(path).read_bytes(), path)
    if strict and expect_digest is not None and ckpt.digest != expect_digest:
        raise CompatibilityError(
            f"{path}: config digest {ckpt.digest} does not match expected {expect_digest}"
        )
    return ckpt


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------

def _group_of(name: str) -> str:
    if ".stc." in f".{name}":
        return "stc"
    if name.startswith("fc") or name.startswith("head"):
        return "head"
    return "backbone"


def model_tensors(model, prefix: str = "", group: Optional[str] = None) -> tuple[dict, dict]:
    """Parameters and buffers of ``model`` keyed by dotted name."""
    tensors, groups = {}, {}
    for name, p in model.named_parameters(prefix):
        tensors[name] = p.data
        groups[name] = group or _group_of(name[len(prefix):])
    for name, b in model.named_buffers(prefix):
        tensors[name] = b
        groups[name] = group or "buffers"
    return tensors, groups


def restore_model(model, tensors: dict, prefix: str = "") -> None:
    """Copy matching tensors into ``model`` in place; every entry must be present."""
    for name, p in model.named_parameters(prefix):
        if name not in tensors:
            raise CompatibilityError(f"checkpoint lacks parameter {name!r}")
        src = tensors[name]
        if src.shape != p.data.shape or src.dtype != p.data.dtype:
            raise CompatibilityError(
                f"parameter {name!r}: checkpoint has {src.dtype}{src.shape}, model has {p.data.dtype}{p.data.shape}"
            )
        p.data[...] = src
    for name, b in model.named_buffers(prefix):
        if name not in tensors:
            raise CompatibilityError(f"checkpoint lacks buffer {name!r}")
        b[...] = tensors[name]
