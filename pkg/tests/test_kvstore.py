"""Two-level key-value store: aggregation, consistency modes, transport."""

import numpy as np
import pytest

from minigraph import tensor as tmod
from minigraph.engine import Engine
from minigraph.errors import ArgumentError, KVStoreError
from minigraph.kvstore import KVStore


def host(t):
    return np.asarray(tmod.to_host(t), np.float32).reshape(t.shape)


def make_store(machines, workers, mode="sequential", tcp=None, threads=16):
    engine = Engine(threads=threads)
    kv = KVStore(machines, workers, mode, engine=engine, tcp=tcp)
    return kv, engine


def push_pull_sum(kv, engine, nworkers, rounds=1):
    """Default updater adds pushes into the stored value."""
    kv.init(0, np.zeros(4, np.float32))
    outs = [tmod.zeros((4,), engine=engine) for _ in range(nworkers)]
    for r in range(rounds):
        for w in range(nworkers):
            val = tmod.from_host((4,), "float32",
                                 np.full(4, w + 1, np.float32), engine=engine)
            kv.push(0, val, w)
        for w in range(nworkers):
            kv.pull(0, outs[w], w)
    return [host(o) for o in outs]


def test_sequential_sum_single_machine():
    kv, engine = make_store(1, 4)
    try:
        got = push_pull_sum(kv, engine, 4)
        want = np.full(4, 1 + 2 + 3 + 4, np.float32)
        for g in got:
            assert np.array_equal(g, want)
    finally:
        kv.close()
        engine.close()


def test_sequential_sum_two_machines():
    kv, engine = make_store(2, 2)
    try:
        got = push_pull_sum(kv, engine, 4, rounds=2)
        want = np.full(4, 2 * (1 + 2 + 3 + 4), np.float32)
        for g in got:
            assert np.array_equal(g, want)
    finally:
        kv.close()
        engine.close()


def test_sequential_pull_reflects_all_round_pushes_identically():
    kv, engine = make_store(2, 2)
    try:
        results = push_pull_sum(kv, engine, 4)
        for other in results[1:]:
            assert np.array_equal(results[0], other)
    finally:
        kv.close()
        engine.close()


def test_eventual_mode_applies_every_push():
    kv, engine = make_store(1, 4, mode="eventual")
    try:
        kv.init(0, np.zeros(4, np.float32))
        for w in range(4):
            val = tmod.from_host((4,), "float32",
                                 np.full(4, w + 1, np.float32), engine=engine)
            kv.push(0, val, w)
        kv.quiesce()
        out = tmod.zeros((4,), engine=engine)
        kv.pull(0, out, 0)
        assert np.array_equal(host(out), np.full(4, 10, np.float32))
    finally:
        kv.close()
        engine.close()


def test_tcp_transport_matches_in_process():
    kv, engine = make_store(2, 2, tcp="127.0.0.1:0")
    try:
        got = push_pull_sum(kv, engine, 4)
        want = np.full(4, 10, np.float32)
        for g in got:
            assert np.array_equal(g, want)
    finally:
        kv.close()
        engine.close()


def test_level2_traffic_is_one_message_per_machine_per_round():
    kv, engine = make_store(2, 2)
    try:
        push_pull_sum(kv, engine, 4, rounds=3)
        stats = kv.stats()
        assert stats["level2_messages"] == 2 * 3
        assert stats["level1_aggregates"] == 2 * 3
        assert stats["pushes"] == 4 * 3
    finally:
        kv.close()
        engine.close()


def test_custom_updater():
    kv, engine = make_store(1, 2)
    try:
        kv.init(0, np.ones(3, np.float32))

        def maxer(key, stored, incoming):
            np.maximum(stored, incoming, out=stored)

        kv.set_updater(maxer)
        for w, v in ((0, 5.0), (1, 2.0)):
            t = tmod.from_host((3,), "float32", np.full(3, v, np.float32),
                               engine=engine)
            kv.push(0, t, w)
        out = tmod.zeros((3,), engine=engine)
        kv.pull(0, out, 0)
        assert np.array_equal(host(out), np.full(3, 7, np.float32))
    finally:
        kv.close()
        engine.close()


def test_errors():
    kv, engine = make_store(1, 2)
    try:
        kv.init(0, np.zeros(2, np.float32))
        with pytest.raises(KVStoreError):
            kv.init(0, np.zeros(2, np.float32))  # double init
        with pytest.raises(KVStoreError):
            kv.push(0, tmod.zeros((3,), engine=engine), 0)  # shape mismatch
        with pytest.raises(KVStoreError):
            kv.push(99, tmod.zeros((2,), engine=engine), 0)  # unknown key
        with pytest.raises(ArgumentError):
            kv.push(0, tmod.zeros((2,), engine=engine), 7)  # bad worker id
        other = Engine(threads=2)
        try:
            with pytest.raises(ArgumentError):
                kv.push(0, tmod.zeros((2,), engine=other), 0)
        finally:
            other.close()
    finally:
        kv.close()
        engine.close()


def test_many_keys_round_trip():
    kv, engine = make_store(1, 2)
    try:
        for k in range(6):
            kv.init(k, np.full(2, k, np.float32))
        for k in range(6):
            for w in range(2):
                kv.push(k, tmod.from_host((2,), "float32", [1, 1],
                                          engine=engine), w)
        for k in range(6):
            out = tmod.zeros((2,), engine=engine)
            kv.pull(k, out, 0)
            assert np.array_equal(host(out), np.full(2, k + 2, np.float32))
    finally:
        kv.close()
        engine.close()
