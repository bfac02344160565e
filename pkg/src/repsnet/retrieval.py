"""Exact cosine top-k index over unit-norm answer embeddings.

File layout (little-endian): b"RNIX", u32 version, u32 d, u64 count, then per
row d float64 values, u32 token count, u32 token ids, u32 id length, UTF-8 id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError

MAGIC = b"RNIX"
VERSION = 1


class Neighbour(NamedTuple):
    score: float
    tokens: list
    sample_id: str


@dataclass
class AnswerIndex:
    d: int
    rows: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    ids: list = field(default_factory=list)
    _matrix: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.rows)

    def add(self, vec, tokens: Sequence[int], sample_id: str) -> None:
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.d:
            raise DimensionError(f"vector of dim {v.shape[0]} into index of dim {self.d}")
        n = np.linalg.norm(v)
        if n == 0 or not np.isfinite(n):
            raise ContractError("cannot index a zero or non-finite vector")
        self.rows.append(v / n)
        self.tokens.append([int(t) for t in tokens])
        self.ids.append(str(sample_id))
        self._matrix = None

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.array(self.rows).reshape(len(self.rows), self.d)
        return self._matrix

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.d:
            raise DimensionError(f"query of dim {q.shape[0]} against index of dim {self.d}")
        n = np.linalg.norm(q)
        if n == 0:
            raise ContractError("zero query vector")
        return self.matrix @ (q / n)

    def topk(self, query, k: int = 1) -> list[Neighbour]:
        if len(self) == 0:
            raise ContractError("top-k search on an empty index")
        if k < 1:
            raise ContractError("k must be >= 1")
        s = self.scores(query)
        # stable sort on -score keeps insertion order among ties
        order = np.argsort(-s, kind="stable")[:k]
        return [Neighbour(float(s[i]), list(self.tokens[i]), self.ids[i]) for i in order]


def index_add(idx: AnswerIndex, vec, tokens, sample_id) -> AnswerIndex:
    idx.add(vec, tokens, sample_id)
    return idx


def index_topk(idx: AnswerIndex, query, k: int = 1) -> list[Neighbour]:
    return idx.topk(query, k)


def index_save(idx: AnswerIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_index(idx))


def dump_index(idx: AnswerIndex) -> bytes:
    parts = [MAGIC, struct.pack("<IIQ", VERSION, idx.d, len(idx))]
    for row, toks, sid in zip(idx.rows, idx.tokens, idx.ids):
        parts.append(np.asarray(row, dtype="<f8").tobytes())
        parts.append(struct.pack("<I", len(toks)))
        parts.append(np.asarray(toks, dtype="<u4").tobytes())
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContractError("index file is truncated")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_index(buf: bytes) -> AnswerIndex:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ContractError("not an answer index file (bad magic)")
    version, d, count = r.unpack("<IIQ")
    if version != VERSION:
        raise ContractError(f"unsupported index version {version}")
    idx = AnswerIndex(d)
    for _ in range(count):
        row = np.frombuffer(r.take(8 * d), dtype="<f8").astype(np.float64)
        (nt,) = r.unpack("<I")
        toks = np.frombuffer(r.take(4 * nt), dtype="<u4").astype(int).tolist()
        (ns,) = r.unpack("<I")
        sid = r.take(ns).decode("utf-8")
        # rows are stored normalized; keep them bit-exact rather than re-normalizing
        idx.rows.append(row)
        idx.tokens.append(toks)
        idx.ids.append(sid)
    if r.pos != len(buf):
        raise ContractError("trailing bytes after index payload")
    return idx


def index_load(path) -> AnswerIndex:
    with open(path, "rb") as fh:
        return parse_index(fh.read())
