"""Binary checkpoint: named float32 tensor table, embedded config, optional optimizer table.

Layout (little-endian)::

    b"SGHM"  u8 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, prod(dims) x f32 }
    u32 config_len, config (UTF-8, ``key = value`` text)
    [ u32 count, count x tensor record ]        optimizer state, optional
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from . import config as C
from .model import SGHM

MAGIC = b"SGHM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    config_text: str
    optimizer: Optional[dict] = None

    @property
    def config(self) -> C.RunConfig:
        return C.parse(self.config_text)


def _table_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"refusing to save non-finite tensor {name!r}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode(tensors: Mapping[str, np.ndarray], config_text: str,
           optimizer: Optional[Mapping[str, np.ndarray]] = None) -> bytes:
    blob = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<B", VERSION), _table_bytes(tensors), struct.pack("<I", len(blob)), blob]
    if optimizer is not None:
        parts.append(_table_bytes(optimizer))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte offset {self.pos} while reading {what} "
                                  f"(need {n} bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def _read_table(r: _Reader, label: str) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I", f"{label} tensor count")
    out = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"{label} tensor {i} name length")
        start = r.pos
        try:
            name = r.take(nlen, f"{label} tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{r.source}: invalid UTF-8 tensor name at byte offset {start}") from None
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        if name in out:
            raise CheckpointError(f"{r.source}: duplicate tensor {name!r}")
        out[name] = arr.astype(np.float32)
    return out


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    (version,) = r.unpack("<B", "format version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version} at byte offset 4 "
                              f"(supported: {VERSION})")
    tensors = _read_table(r, "model")
    (clen,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        text = r.take(clen, "config blob").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{source}: config blob at byte offset {start} is not UTF-8") from None
    optimizer = None if r.done else _read_table(r, "optimizer")
    if not r.done:
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes at byte offset {r.pos}")
    return Checkpoint(tensors, text, optimizer)


def save(path: Union[str, Path], model: SGHM, run_config: C.RunConfig,
         optimizer: Optional[Mapping[str, np.ndarray]] = None) -> None:
    Path(path).write_bytes(encode(model.named_tensors(), C.serialize(run_config), optimizer))


def load(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data, str(path))


def assign(model: SGHM, tensors: Mapping[str, np.ndarray], groups: Optional[Iterable[str]] = None) -> None:
    """Copy checkpoint tensors into ``model`` in place.

    Names the model does not have are an error.  With ``groups``, only those
    groups are written and each must be fully present; otherwise every model
    tensor must be present.
    """
    own = model.named_tensors()
    unknown = sorted(set(tensors) - set(own))
    if unknown:
        raise CheckpointError(f"checkpoint has unknown tensors: {', '.join(unknown)}")
    wanted = [k for k in own if groups is None or model.group_of(k) in set(groups)]
    missing = [k for k in wanted if k not in tensors]
    if missing:
        lost = sorted({model.group_of(k) for k in missing})
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors of group(s) {', '.join(lost)}: "
                              f"{', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}")
    for k in wanted:
        if own[k].shape != tensors[k].shape:
            raise CheckpointError(f"tensor {k!r}: checkpoint shape {tensors[k].shape} != model shape {own[k].shape}")
    for k in wanted:
        own[k][...] = tensors[k]


def build_model(ckpt: Checkpoint) -> SGHM:
    model = SGHM(ckpt.config.model)
    assign(model, ckpt.tensors)
    model.eval()
    return model
