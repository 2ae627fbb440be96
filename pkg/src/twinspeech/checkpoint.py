"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"TWSCKPT\\x00"
    version      u32
    config_len   u32
    config       config_len bytes of UTF-8 JSON
    n_tensors    u32
    n_tensors x  u16 name_len, name, u8 dtype tag (0 = f32, 1 = f64), u8 ndim,
                 ndim x u32 dims, payload
    crc32        u32 over everything before it
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import FormatError, VersionError
from .model import Architecture, ModelParams
from .optim import OptimizerState

MAGIC = b"TWSCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    config: dict
    params: ModelParams
    opt_state: OptimizerState = field(default_factory=OptimizerState)
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def equal(self, other) -> bool:
        return (self.format_version == other.format_version and self.config == other.config
                and self.params.arch == other.params.arch and self.params.equal(other.params)
                and self.opt_state.equal(other.opt_state) and self.epoch == other.epoch
                and self.loss_history == other.loss_history and self.meta == other.meta
                and self.extra.keys() == other.extra.keys()
                and all(np.array_equal(self.extra[k], other.extra[k]) for k in self.extra))


def _tensors(ckpt):
    out = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    out += [(f"adam_m/{k}", v) for k, v in ckpt.opt_state.m.items()]
    out += [(f"adam_v/{k}", v) for k, v in ckpt.opt_state.v.items()]
    out += [(f"extra/{k}", v) for k, v in ckpt.extra.items()]
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config,
        "architecture": ckpt.params.arch.to_dict(),
        "epoch": ckpt.epoch,
        "optimizer_step": ckpt.opt_state.step,
        "loss_history": ckpt.loss_history,
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.format_version, len(blob)))
    buf.write(blob)
    tensors = _tensors(ckpt)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(8) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, config_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    if len(blob) < 4 or struct.unpack("<I", blob[-4:])[0] != zlib.crc32(blob[:-4]):
        raise FormatError("checkpoint is truncated or corrupt (checksum mismatch)")
    try:
        header = json.loads(r.take(config_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        tag, ndim = r.unpack("<BB")
        if tag not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    if r.pos != len(blob) - 4:
        raise FormatError("trailing bytes after tensor block")

    arch = Architecture.from_dict(header["architecture"])
    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    params = ModelParams(arch, group("param/"))
    state = OptimizerState(header.get("optimizer_step", 0), group("adam_m/"), group("adam_v/"))
    return Checkpoint(header["config"], params, state, header["epoch"], header["loss_history"],
                      header.get("meta", {}), version, group("extra/"))


def save(ckpt: Checkpoint, path) -> None:
    blob = dumps(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
