"""Two-level key-value store for data-parallel training.

Topology: M machines x W workers. Each machine has a level-1 server that
aggregates same-key pushes from its workers; one level-2 server merges the
machine aggregates and applies the registered updater to the stored value.
Workers push gradients and pull values; both are engine ops (push reads the
tensor's tag, pull writes the output's tag).

Consistency: "sequential" is round-structured; a worker's k-th push of a
key belongs to round k, the level-2 server applies one updater call per key
and round on the tree-merged total, and a worker's pull blocks until its
own round's snapshot exists, so all workers see identical round values.
"eventual" forwards and applies every push immediately and serves pulls
from the level-1 cache with no staleness bound.

Determinism: level-1 merges worker values in ascending worker id and
level-2 merges machine aggregates in ascending machine id, both with the
same balanced pairwise tree used for batch reductions, which makes sharded
gradient sums bitwise equal to the whole-batch sum for power-of-two sizes.

All cross-role hand-off is by value; servers are single-threaded loops on
FIFO inboxes. The level-1 to level-2 links can optionally run over TCP.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import wire
from .engine import Engine, default_engine
from .errors import ArgumentError, KVStoreError
from .kernels import tree_sum
from .tensor import ETYPES, Tensor
from .wire import Msg

log = logging.getLogger(__name__)

MODES = ("sequential", "eventual")


def add_updater(key: int, stored: np.ndarray, incoming: np.ndarray) -> None:
    """Default updater: summation."""
    np.add(stored, incoming, out=stored)


class _Mailbox:
    """Per-caller response box; entries keyed by (type, key, seq)."""

    def __init__(self):
        self._cond = threading.Condition()
        self._box: Dict[Tuple[int, int, int], List[Msg]] = {}

    def deliver(self, msg: Msg) -> None:
        with self._cond:
            self._box.setdefault((msg.type, msg.key, msg.seq), []).append(msg)
            self._cond.notify_all()

    def take(self, mtype: int, key: int, seq: int, timeout: float = 120.0) -> Msg:
        k = (mtype, key, seq)
        with self._cond:
            if not self._cond.wait_for(lambda: self._box.get(k), timeout):
                raise KVStoreError(f"timed out waiting for response {k}")
            entries = self._box[k]
            msg = entries.pop(0)
            if not entries:
                del self._box[k]
            return msg


class _QueuePort:
    def __init__(self, inbox: "queue.Queue"):
        self._inbox = inbox

    def send(self, msg: Msg) -> None:
        self._inbox.put(msg)


class KVStore:
    def __init__(self, machines: int = 1, workers: int = 1,
                 mode: str = "sequential", etype: str = "float32",
                 engine: Optional[Engine] = None, tcp: Optional[str] = None):
        if machines < 1 or workers < 1:
            raise ArgumentError("topology needs machines >= 1 and workers >= 1")
        if mode not in MODES:
            raise ArgumentError(f"unknown consistency mode {mode!r}")
        if etype not in ETYPES:
            raise ArgumentError(f"unknown etype {etype!r}")
        self.machines = machines
        self.workers = workers
        self.mode = mode
        self.etype = etype
        self.dtype = ETYPES[etype]
        self.engine = engine or default_engine()
        self._control = machines * workers
        self._l2_id = machines * workers + 1
        self._lock = threading.Lock()
        self._shapes: Dict[int, tuple] = {}
        self._rounds: Dict[Tuple[int, int], int] = {}
        self._pull_seq: Dict[int, int] = {}
        self._barrier_seq = 0
        self._stats = {"level2_messages": 0, "level2_updates": 0,
                       "level1_aggregates": 0, "pushes": 0, "pulls": 0}
        self._updater: Callable = add_updater
        self._closed = False

        self._q1 = [queue.Queue() for _ in range(machines)]
        self._q2: "queue.Queue" = queue.Queue()
        self._mail = {gid: _Mailbox() for gid in range(machines * workers)}
        self._mail[self._control] = _Mailbox()
        # One stream tag per worker serializes that worker's push and pull
        # closures, so at most one blocking pull per worker occupies an
        # engine thread regardless of how many keys it touches per round.
        self._streams = [self.engine.new_tag(f"kv-stream-{gid}")
                         for gid in range(machines * workers)]
        self._socks: List[socket.socket] = []

        if tcp is None:
            self._up = [_QueuePort(self._q2) for _ in range(machines)]
            self._down = [_QueuePort(self._q1[m]) for m in range(machines)]
        else:
            self._up, self._down = self._connect_tcp(tcp)

        self._threads = [threading.Thread(target=self._l2_loop, daemon=True,
                                          name="kvs-l2")]
        for m in range(machines):
            self._threads.append(threading.Thread(
                target=self._l1_loop, args=(m,), daemon=True, name=f"kvs-l1-{m}"))
        for t in self._threads:
            t.start()

    # --------------------------------------------------------------- wiring

    def _connect_tcp(self, endpoint: str):
        host, port = endpoint.rsplit(":", 1)
        listener = socket.create_server((host, int(port)))
        addr = listener.getsockname()[:2]
        up, down = [None] * self.machines, [None] * self.machines
        for m in range(self.machines):
            client = socket.create_connection(addr)
            wire.write_frame(client, Msg(wire.BARRIER, m, m, 0), self.dtype)
            server, _ = listener.accept()
            hello = wire.read_frame(server, self.dtype)
            mm = hello.key
            up[mm] = wire.SocketPort(client, self.dtype)
            down[mm] = wire.SocketPort(server, self.dtype)
            # Down traffic arrives on the client socket, up traffic on the
            # server socket; route each into the right inbox.
            wire.pump(client, self.dtype, self._q1[mm])
            wire.pump(server, self.dtype, self._q2)
            self._socks += [client, server]
        listener.close()
        return up, down

    # ------------------------------------------------------------ public API

    def init(self, key: int, value) -> None:
        """Broadcast an initial value for ``key`` to every server; blocks
        until each level-1 server holds it."""
        if key < 0:
            raise ArgumentError("keys are non-negative integers")
        if isinstance(value, Tensor):
            value.engine.wait_for(value.tag)
            shape, arr = value.shape, np.array(value.arr, dtype=self.dtype)
        else:
            arr = np.array(value, dtype=self.dtype)
            shape = arr.shape
        with self._lock:
            if key in self._shapes:
                raise KVStoreError(f"double init of key {key}")
            self._shapes[key] = tuple(shape)
        self._q2.put(Msg(wire.INIT, key, self._control, 0, arr.ravel().copy()))
        for m in range(self.machines):
            self._q1[m].put(Msg(wire.PULL_REQ, key, self._control, 0))
        for _ in range(self.machines):
            self._mail[self._control].take(wire.PULL_RESP, key, 0)

    def set_updater(self, fn: Callable[[int, np.ndarray, np.ndarray], None]) -> None:
        """Install a store-wide merge function run at level 2."""
        done = threading.Event()
        self._q2.put(Msg(wire.UPDATER, 0, self._control, 0, payload=(fn, done)))
        if not done.wait(timeout=60):
            raise KVStoreError("set_updater timed out")

    def push(self, key: int, value: Tensor, worker: int) -> None:
        """Schedule this worker's push; in sequential mode it joins the
        worker's next synchronization round for the key."""
        self._check_worker(worker)
        shape = self._key_shape(key)
        if value.shape != shape:
            raise KVStoreError(f"push shape {value.shape} != init shape {shape}")
        if value.engine is not self.engine:
            raise ArgumentError("pushed tensor is on another engine")
        m = worker // self.workers
        with self._lock:
            r = self._rounds.get((worker, key), 0) + 1
            self._rounds[(worker, key)] = r
            self._stats["pushes"] += 1

        def run(arr=value.arr, q=self._q1[m], key=key, gid=worker, r=r):
            q.put(Msg(wire.PUSH, key, gid, r,
                      np.array(arr, dtype=self.dtype).ravel()))

        self.engine.push(run, reads=[value.tag],
                         writes=[self._streams[worker]],
                         label=f"kv-push:{key}")

    def pull(self, key: int, out: Tensor, worker: int) -> None:
        """Schedule a pull into ``out``. Sequential mode blocks until the
        snapshot for this worker's push round exists (round barrier);
        eventual mode returns the level-1 server's current value."""
        self._check_worker(worker)
        shape = self._key_shape(key)
        if out.shape != shape:
            raise KVStoreError(f"pull shape {out.shape} != init shape {shape}")
        if out.engine is not self.engine:
            raise ArgumentError("pulled tensor is on another engine")
        m = worker // self.workers
        with self._lock:
            if self.mode == "sequential":
                seq = self._rounds.get((worker, key), 0)
            else:
                seq = self._pull_seq.get(worker, 0) + 1
                self._pull_seq[worker] = seq
            self._stats["pulls"] += 1
        mail = self._mail[worker]

        def run(oa=out.arr, q=self._q1[m], key=key, gid=worker, seq=seq):
            q.put(Msg(wire.PULL_REQ, key, gid, seq))
            msg = mail.take(wire.PULL_RESP, key, seq)
            if msg.value is None:
                raise KVStoreError(f"pull of key {key} failed")
            np.copyto(oa, msg.value.reshape(oa.shape))

        self.engine.push(run, writes=[out.tag, self._streams[worker]],
                         label=f"kv-pull:{key}")

    def round_barrier(self) -> None:
        """Flush: returns once the level-2 server has consumed everything
        each level-1 server had forwarded before the barrier."""
        with self._lock:
            self._barrier_seq += 1
            bid = self._barrier_seq
        for m in range(self.machines):
            self._q1[m].put(Msg(wire.BARRIER, m, self._control, bid))
        for m in range(self.machines):
            self._mail[self._control].take(wire.BARRIER, m, bid)

    def quiesce(self) -> None:
        """Two barrier passes: the first drains pushes up to level 2, the
        second drains the resulting snapshot broadcasts back down, after
        which every level-1 replica is up to date."""
        self.round_barrier()
        self.round_barrier()

    def stats(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._stats)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for q in self._q1:
            q.put(Msg(wire.STOP, 0, self._control, 0))
        self._q2.put(Msg(wire.STOP, 0, self._control, 0))
        for t in self._threads:
            t.join(timeout=30)
        for s in self._socks:
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --------------------------------------------------------------- helpers

    def _check_worker(self, worker: int):
        if not 0 <= worker < self.machines * self.workers:
            raise ArgumentError(f"no worker {worker} in this topology")

    def _key_shape(self, key: int) -> tuple:
        with self._lock:
            if key not in self._shapes:
                raise KVStoreError(f"key {key} used before init")
            return self._shapes[key]

    def _bump(self, name: str, by: int = 1):
        with self._lock:
            self._stats[name] += by

    # --------------------------------------------------------- level-1 server

    def _l1_loop(self, m: int):
        seq_mode = self.mode == "sequential"
        snapshots: Dict[int, Dict[int, np.ndarray]] = {}
        parked: Dict[Tuple[int, Optional[int]], List[Tuple[int, int]]] = {}
        pushbuf: Dict[Tuple[int, int], Dict[int, np.ndarray]] = {}
        up = self._up[m]

        def respond(key, sender, seq, value):
            self._mail[sender].deliver(
                Msg(wire.PULL_RESP, key, m, seq, value.copy()))

        def serve_parked(key, rnd, value):
            for sender, seq in parked.pop((key, rnd), []):
                respond(key, sender, seq, value)
            if rnd == 0:
                for sender, seq in parked.pop((key, None), []):
                    respond(key, sender, seq, value)

        try:
            while True:
                msg = self._q1[m].get()
                t = msg.type
                if t == wire.STOP:
                    return
                if t == wire.INIT:
                    snapshots.setdefault(msg.key, {})[0] = msg.value
                    serve_parked(msg.key, 0, msg.value)
                elif t == wire.PUSH:
                    if not seq_mode:
                        up.send(Msg(wire.PUSH, msg.key, m, msg.seq, msg.value))
                        continue
                    d = pushbuf.setdefault((msg.key, msg.seq), {})
                    d[msg.sender] = msg.value
                    if len(d) == self.workers:
                        agg = tree_sum(np.stack([d[g] for g in sorted(d)]))
                        up.send(Msg(wire.PUSH, msg.key, m, msg.seq, agg))
                        self._bump("level1_aggregates")
                        del pushbuf[(msg.key, msg.seq)]
                elif t == wire.PULL_REQ:
                    snaps = snapshots.get(msg.key, {})
                    if seq_mode:
                        snap = snaps.get(msg.seq)
                        want = msg.seq
                    else:
                        snap = snaps.get(0) if snaps else None
                        want = None
                    if snap is None:
                        parked.setdefault((msg.key, want), []).append(
                            (msg.sender, msg.seq))
                    else:
                        respond(msg.key, msg.sender, msg.seq, snap)
                elif t == wire.PULL_RESP:
                    # Snapshot broadcast from level 2.
                    rnd = msg.seq if seq_mode else 0
                    snapshots.setdefault(msg.key, {})[rnd] = msg.value
                    if seq_mode:
                        serve_parked(msg.key, rnd, msg.value)
                elif t == wire.BARRIER:
                    if msg.sender == self._l2_id:
                        self._mail[self._control].deliver(msg)
                    else:
                        up.send(Msg(wire.BARRIER, msg.key, m, msg.seq))
        except Exception:
            log.exception("level-1 server %d failed", m)

    # --------------------------------------------------------- level-2 server

    def _l2_loop(self):
        seq_mode = self.mode == "sequential"
        store: Dict[int, np.ndarray] = {}
        buf: Dict[Tuple[int, int], Dict[int, np.ndarray]] = {}

        def broadcast(mtype, key, seq, value):
            for port in self._down:
                port.send(Msg(mtype, key, self._l2_id, seq, value.copy()))

        try:
            while True:
                msg = self._q2.get()
                t = msg.type
                if t == wire.STOP:
                    return
                if t == wire.UPDATER:
                    fn, done = msg.payload
                    self._updater = fn
                    done.set()
                elif t == wire.INIT:
                    store[msg.key] = msg.value.copy()
                    broadcast(wire.INIT, msg.key, 0, store[msg.key])
                elif t == wire.PUSH:
                    self._bump("level2_messages")
                    if not seq_mode:
                        self._updater(msg.key, store[msg.key], msg.value)
                        self._bump("level2_updates")
                        broadcast(wire.PULL_RESP, msg.key, 0, store[msg.key])
                        continue
                    d = buf.setdefault((msg.key, msg.seq), {})
                    d[msg.sender] = msg.value
                    if len(d) == self.machines:
                        total = tree_sum(np.stack([d[i] for i in sorted(d)]))
                        self._updater(msg.key, store[msg.key], total)
                        self._bump("level2_updates")
                        broadcast(wire.PULL_RESP, msg.key, msg.seq, store[msg.key])
                        del buf[(msg.key, msg.seq)]
                elif t == wire.BARRIER:
                    self._down[msg.key].send(
                        Msg(wire.BARRIER, msg.key, self._l2_id, msg.seq))
        except Exception:
            log.exception("level-2 server failed")
