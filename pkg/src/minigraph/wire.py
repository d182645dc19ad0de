"""Frame codec and socket transport for the key-value store.

Little-endian frame: magic u32 | msg type u8 | key u64 | payload length u64
| sender u64 | seq u64 | payload (f32/f64 array). The 16-byte (sender, seq)
pair correlates responses. The element type is store-wide and fixed out of
band; payloads carry flat arrays only.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import KVStoreError

MAGIC = 0x4B565331  # "KVS1"

INIT = 0
PUSH = 1
PULL_REQ = 2
PULL_RESP = 3
BARRIER = 4
# In-process only; never framed.
UPDATER = 5
STOP = 6

_WIRE_TYPES = (INIT, PUSH, PULL_REQ, PULL_RESP, BARRIER)

_HEADER = struct.Struct("<IBQQQQ")


@dataclass
class Msg:
    type: int
    key: int
    sender: int
    seq: int
    value: Optional[np.ndarray] = None
    payload: object = None  # in-process extras (callables, events)


def encode_frame(msg: Msg, dtype) -> bytes:
    if msg.type not in _WIRE_TYPES:
        raise KVStoreError(f"message type {msg.type} cannot cross the wire")
    body = b""
    if msg.value is not None:
        body = np.ascontiguousarray(msg.value, dtype=dtype).tobytes()
    head = _HEADER.pack(MAGIC, msg.type, msg.key, len(body), msg.sender, msg.seq)
    return head + body


def decode_frame(buf: bytes, dtype) -> Msg:
    if len(buf) < _HEADER.size:
        raise KVStoreError("truncated frame header")
    magic, mtype, key, plen, sender, seq = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise KVStoreError(f"bad frame magic {magic:#x}")
    if len(buf) != _HEADER.size + plen:
        raise KVStoreError("frame length mismatch")
    value = None
    if plen:
        value = np.frombuffer(buf[_HEADER.size:], dtype=dtype).copy()
    return Msg(mtype, key, sender, seq, value)


def _read_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            return None  # peer closed
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket, dtype) -> Optional[Msg]:
    head = _read_exact(sock, _HEADER.size)
    if head is None:
        return None
    magic, mtype, key, plen, sender, seq = _HEADER.unpack(head)
    if magic != MAGIC:
        raise KVStoreError(f"bad frame magic {magic:#x}")
    body = _read_exact(sock, plen) if plen else b""
    if body is None:
        raise KVStoreError("truncated frame payload")
    value = np.frombuffer(body, dtype=dtype).copy() if plen else None
    return Msg(mtype, key, sender, seq, value)


def write_frame(sock: socket.socket, msg: Msg, dtype) -> None:
    sock.sendall(encode_frame(msg, dtype))


class SocketPort:
    """One direction of a duplex frame link: thread-safe send."""

    def __init__(self, sock: socket.socket, dtype):
        self.sock = sock
        self.dtype = dtype
        self._lock = threading.Lock()

    def send(self, msg: Msg) -> None:
        with self._lock:
            write_frame(self.sock, msg, self.dtype)


def pump(sock: socket.socket, dtype, inbox) -> threading.Thread:
    """Background thread copying incoming frames into a queue until EOF."""

    def loop():
        try:
            while True:
                msg = read_frame(sock, dtype)
                if msg is None:
                    return
                inbox.put(msg)
        except OSError:
            return

    t = threading.Thread(target=loop, daemon=True, name="kvs-wire-pump")
    t.start()
    return t
