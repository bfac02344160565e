"""RSNC checkpoint container.

Layout (little-endian): b"RSNC", u32 version, u32 byte length + UTF-8 config
text, u32 tensor count, then per tensor u32 name length + UTF-8 name, u32
rank, rank x u64 extents and the row-major float64 payload.  Tensors are
written in sorted name order so equal models give equal bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import Config, format_config, parse_config
from .errors import ContractError
from .tensor import Tensor, parameter

MAGIC = b"RSNC"
VERSION = 1


def dump_checkpoint(cfg: Config, params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = format_config(cfg).encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContractError(f"checkpoint truncated at byte {self.pos}")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def parse_checkpoint(buf: bytes) -> tuple[Config, dict]:
    cur = _Cursor(buf)
    if cur.take(4) != MAGIC:
        raise ContractError("not an RSNC checkpoint (bad magic)")
    version = cur.u32()
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    try:
        cfg = parse_config(cur.take(cur.u32()).decode("utf-8"))
        params = {}
        for _ in range(cur.u32()):
            name = cur.take(cur.u32()).decode("utf-8")
            shape = tuple(cur.u64() for _ in range(cur.u32()))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(cur.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
            if name in params:
                raise ContractError(f"duplicate tensor {name!r} in checkpoint")
            params[name] = parameter(data, name)
    except UnicodeDecodeError as err:
        raise ContractError("checkpoint holds invalid UTF-8") from err
    if cur.pos != len(buf):
        raise ContractError(f"{len(buf) - cur.pos} trailing bytes after checkpoint")
    return cfg, params


def save_checkpoint(cfg: Config, params: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(cfg, params))


def load_checkpoint(path) -> tuple[Config, dict]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
