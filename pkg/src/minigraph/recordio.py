"""Packed record files with checksums and an offset index.

Layout (little-endian): header magic u32 + version u32, then records of
[length u32][crc32 u32][payload]. A companion ``path + ".idx"`` file holds
one u64 byte offset per record, pointing at each record's start, strictly
increasing. crc32 is the IEEE polynomial (zlib.crc32).

Record 0 of an example file is metadata: the feature dimension as u32.
Every following record is one example: label u32 + D float32 features.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Tuple

import numpy as np

from .errors import ArgumentError, CorruptRecordError, RecordParseError

MAGIC = 0x4D585245
VERSION = 1

_FILE_HEADER = struct.Struct("<II")
_REC_HEADER = struct.Struct("<II")   # length, crc32
_META = struct.Struct("<I")          # feature dimension
_LABEL = struct.Struct("<I")


def index_path(path: str) -> str:
    return path + ".idx"


class RecordWriter:
    """Appends raw payload records and writes the index on close."""

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "wb")
        self._f.write(_FILE_HEADER.pack(MAGIC, VERSION))
        self._offsets: List[int] = []

    def write(self, payload: bytes) -> int:
        self._offsets.append(self._f.tell())
        self._f.write(_REC_HEADER.pack(len(payload), zlib.crc32(payload)))
        self._f.write(payload)
        return len(self._offsets) - 1

    def close(self) -> None:
        self._f.close()
        with open(index_path(self.path), "wb") as idx:
            for off in self._offsets:
                idx.write(struct.pack("<Q", off))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class RecordFile:
    """Random and sequential access to a packed record file."""

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "rb")
        head = self._f.read(_FILE_HEADER.size)
        if len(head) < _FILE_HEADER.size:
            raise RecordParseError(f"{path}: truncated file header")
        magic, version = _FILE_HEADER.unpack(head)
        if magic != MAGIC:
            raise RecordParseError(f"{path}: bad magic {magic:#x}")
        if version != VERSION:
            raise RecordParseError(f"{path}: unsupported version {version}")
        try:
            raw = open(index_path(path), "rb").read()
        except OSError as exc:
            raise RecordParseError(f"{path}: missing index file") from exc
        if len(raw) % 8:
            raise RecordParseError(f"{path}: index size not a multiple of 8")
        self._offsets = struct.unpack(f"<{len(raw) // 8}Q", raw)
        last = -1
        for off in self._offsets:
            if off <= last:
                raise RecordParseError(f"{path}: index offsets not increasing")
            last = off

    def __len__(self) -> int:
        return len(self._offsets)

    def read_record(self, i: int) -> bytes:
        if not 0 <= i < len(self._offsets):
            raise ArgumentError(f"record {i} out of range (file has {len(self)})")
        self._f.seek(self._offsets[i])
        head = self._f.read(_REC_HEADER.size)
        if len(head) < _REC_HEADER.size:
            raise RecordParseError(f"{self.path}: truncated record {i} header")
        length, crc = _REC_HEADER.unpack(head)
        payload = self._f.read(length)
        if len(payload) < length:
            raise RecordParseError(f"{self.path}: truncated record {i} payload")
        if zlib.crc32(payload) != crc:
            raise CorruptRecordError(f"{self.path}: crc mismatch at record {i}")
        return payload

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ----------------------------------------------------------- example schema

@dataclass
class Example:
    label: int
    features: np.ndarray  # float32, shape (D,)


def _encode_example(ex: Example, dim: int) -> bytes:
    feats = np.asarray(ex.features, dtype="<f4").ravel()
    if feats.size != dim:
        raise ArgumentError(f"example has {feats.size} features, file dim is {dim}")
    return _LABEL.pack(int(ex.label)) + feats.tobytes()

def _decode_example(payload: bytes, dim: int, i: int) -> Example:
    want = _LABEL.size + 4 * dim
    if len(payload) != want:
        raise RecordParseError(f"example record {i}: {len(payload)} bytes, "
                               f"expected {want}")
    (label,) = _LABEL.unpack_from(payload)
    feats = np.frombuffer(payload, dtype="<f4", offset=_LABEL.size).copy()
    return Example(label, feats)


def pack(examples: Iterable[Example], path: str) -> int:
    """Write examples (all with one feature dimension); returns the count."""
    it = iter(examples)
    try:
        first = next(it)
    except StopIteration:
        raise ArgumentError("pack: no examples") from None
    dim = np.asarray(first.features).size
    n = 0
    with RecordWriter(path) as w:
        w.write(_META.pack(dim))
        w.write(_encode_example(first, dim))
        n = 1
        for ex in it:
            w.write(_encode_example(ex, dim))
            n += 1
    return n


class ExampleFile:
    """Example-level view over a record file (record 0 is metadata)."""

    def __init__(self, path: str):
        self.records = RecordFile(path)
        if len(self.records) < 1:
            raise RecordParseError(f"{path}: missing metadata record")
        (self.dim,) = _META.unpack(self.records.read_record(0))

    def __len__(self) -> int:
        return len(self.records) - 1

    def read_at(self, i: int) -> Example:
        if not 0 <= i < len(self):
            raise ArgumentError(f"example {i} out of range (file has {len(self)})")
        return _decode_example(self.records.read_record(i + 1), self.dim, i)

    def close(self) -> None:
        self.records.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_at(path: str, i: int) -> Example:
    with ExampleFile(path) as f:
        return f.read_at(i)


def scan(path: str) -> Iterator[Example]:
    with ExampleFile(path) as f:
        for i in range(len(f)):
            yield f.read_at(i)
