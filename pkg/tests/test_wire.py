"""Wire frames: encode/decode round trip, framing errors."""

import numpy as np
import pytest

from minigraph import wire
from minigraph.errors import KVStoreError
from minigraph.wire import Msg


def round_trip(msg, dtype=np.float32):
    frame = wire.encode_frame(msg, dtype)
    return wire.decode_frame(frame, dtype)


def test_round_trip_with_payload():
    value = np.arange(6, dtype=np.float32)
    got = round_trip(Msg(wire.PUSH, key=3, sender=2, seq=9, value=value))
    assert (got.type, got.key, got.sender, got.seq) == (wire.PUSH, 3, 2, 9)
    assert np.array_equal(got.value, value)


def test_round_trip_without_payload():
    got = round_trip(Msg(wire.PULL_REQ, key=1, sender=0, seq=4))
    assert got.value is None
    assert got.type == wire.PULL_REQ


def test_float64_payload():
    value = np.array([1.5, -2.5])
    got = round_trip(Msg(wire.PULL_RESP, key=0, sender=1, seq=2,
                         value=value), dtype=np.float64)
    assert np.array_equal(got.value, value)
    assert got.value.dtype == np.float64


def test_bad_magic_rejected():
    frame = bytearray(wire.encode_frame(
        Msg(wire.PUSH, key=0, sender=0, seq=0), np.float32))
    frame[0] ^= 0xFF
    with pytest.raises(KVStoreError):
        wire.decode_frame(bytes(frame), np.float32)


def test_truncated_frame_rejected():
    frame = wire.encode_frame(
        Msg(wire.PUSH, key=0, sender=0, seq=0,
            value=np.ones(4, np.float32)), np.float32)
    with pytest.raises(KVStoreError):
        wire.decode_frame(frame[:-3], np.float32)


def test_local_only_message_types_not_encodable():
    with pytest.raises(KVStoreError):
        wire.encode_frame(Msg(wire.UPDATER, key=0, sender=0, seq=0),
                          np.float32)
