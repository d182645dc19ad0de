"""Mutation-aware dependency engine.

Operations are pushed with explicit read-tag and write-tag sets. A worker
pool executes an operation as soon as its conflicts are resolved. Per tag,
conflicting operations complete in push order; consecutive readers of a tag
may run concurrently; a writer excludes all other access to that tag.
"""

from __future__ import annotations

import itertools
import os
import queue
import threading
from collections import deque
from typing import Callable, Iterable, Optional

from .errors import LifecycleError, OperationFailed, StateError

_READ = 0
_WRITE = 1

# Set on engine worker threads so closures cannot call wait_* (deadlock rule).
_worker_ctx = threading.local()


class ResourceTag:
    """Unique id for one mutable resource. Never reused within an engine."""

    __slots__ = (
        "id", "label", "engine",
        "_queue", "_active_readers", "_active_writer",
        "_pending", "_poison", "_dying", "_dead", "_on_delete",
    )

    def __init__(self, tag_id: int, label: str, engine: "Engine"):
        self.id = tag_id
        self.label = label
        self.engine = engine
        self._queue: deque = deque()          # (op, mode) waiting for grant
        self._active_readers = 0
        self._active_writer = False
        self._pending = 0                     # pushed but not completed
        self._poison: Optional[BaseException] = None
        self._dying = False
        self._dead = False
        self._on_delete: Optional[Callable[[], None]] = None

    def __repr__(self):
        return f"ResourceTag({self.id}, {self.label!r})"


class _EngineOp:
    __slots__ = ("closure", "reads", "writes", "remaining", "seq", "label")

    def __init__(self, closure, reads, writes, seq, label):
        self.closure = closure
        self.reads = reads
        self.writes = writes
        self.remaining = len(reads) + len(writes)
        self.seq = seq
        self.label = label


class Engine:
    """Thread-pool scheduler with per-tag FIFO conflict resolution."""

    def __init__(self, threads: Optional[int] = None):
        self.num_threads = threads or max(os.cpu_count() or 4, 4)
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._ready: "queue.SimpleQueue" = queue.SimpleQueue()
        self._tag_ids = itertools.count(1)
        self._op_seq = itertools.count(1)
        self._pending_total = 0
        self._executed = 0
        self._inflight: dict[int, _EngineOp] = {}
        self._closed = False
        self._workers = [
            threading.Thread(target=self._worker_loop, daemon=True,
                             name=f"minigraph-engine-{i}")
            for i in range(self.num_threads)
        ]
        for w in self._workers:
            w.start()

    # ------------------------------------------------------------------ tags

    def new_tag(self, label: str = "") -> ResourceTag:
        return ResourceTag(next(self._tag_ids), label, self)

    # ------------------------------------------------------------------ push

    def push(self, closure: Callable[[], None],
             reads: Iterable[ResourceTag] = (),
             writes: Iterable[ResourceTag] = (),
             label: str = "") -> None:
        """Schedule ``closure``. It runs after every earlier-pushed op that
        conflicts on any of its tags; non-conflicting ops may interleave."""
        writes = tuple(dict.fromkeys(writes))
        wset = set(writes)
        # A tag in both sets is normalized to writes-only.
        reads = tuple(t for t in dict.fromkeys(reads) if t not in wset)
        with self._lock:
            self._check_open()
            for t in reads + writes:
                if t._dying or t._dead:
                    raise LifecycleError(f"push on deleted tag {t!r}")
            self._enqueue_locked(closure, reads, writes, label)

    def push_delete(self, tag: ResourceTag,
                    on_delete: Optional[Callable[[], None]] = None) -> None:
        """After all pending ops on ``tag`` complete, free its resources and
        mark the tag dead. Further pushes on the tag are lifecycle errors."""
        with self._lock:
            self._check_open()
            if tag._dying or tag._dead:
                raise LifecycleError(f"double delete of tag {tag!r}")
            tag._dying = True
            tag._on_delete = on_delete

            def _delete():
                if tag._on_delete is not None:
                    tag._on_delete()
                tag._dead = True

            self._enqueue_locked(_delete, (), (tag,), f"delete:{tag.label}")

    def _enqueue_locked(self, closure, reads, writes, label):
        op = _EngineOp(closure, reads, writes, next(self._op_seq), label)
        self._pending_total += 1
        self._inflight[op.seq] = op
        for t in reads:
            t._pending += 1
            t._queue.append((op, _READ))
        for t in writes:
            t._pending += 1
            t._queue.append((op, _WRITE))
        if not reads and not writes:
            self._ready.put(op)
            return
        for t in reads + writes:
            self._pump_locked(t)

    def _pump_locked(self, tag: ResourceTag):
        q = tag._queue
        while q:
            op, mode = q[0]
            if mode == _WRITE:
                if tag._active_readers == 0 and not tag._active_writer:
                    q.popleft()
                    tag._active_writer = True
                    self._grant_locked(op)
                break
            if tag._active_writer:
                break
            q.popleft()
            tag._active_readers += 1
            self._grant_locked(op)

    def _grant_locked(self, op: _EngineOp):
        op.remaining -= 1
        if op.remaining == 0:
            self._ready.put(op)

    # ------------------------------------------------------------ execution

    def _worker_loop(self):
        _worker_ctx.active = True
        while True:
            op = self._ready.get()
            if op is None:
                return
            error = None
            try:
                op.closure()
            except BaseException as exc:  # noqa: BLE001 - poisons, re-raised later
                error = exc
            self._complete(op, error)

    def _complete(self, op: _EngineOp, error):
        with self._lock:
            self._executed += 1
            for t in op.reads:
                t._active_readers -= 1
                t._pending -= 1
            for t in op.writes:
                t._active_writer = False
                t._pending -= 1
                if error is not None and t._poison is None:
                    t._poison = error
            self._pending_total -= 1
            self._inflight.pop(op.seq, None)
            for t in op.reads + op.writes:
                self._pump_locked(t)
            self._idle.notify_all()

    # ----------------------------------------------------------------- sync

    def wait_for(self, tag: ResourceTag) -> None:
        """Block until every op touching ``tag`` has completed, then surface
        the first error captured on the tag, if any."""
        self._check_waitable()
        with self._idle:
            self._idle.wait_for(lambda: tag._pending == 0)
            if tag._poison is not None:
                raise OperationFailed(
                    f"operation on tag {tag.label!r} failed: {tag._poison!r}"
                ) from tag._poison

    def wait_all(self) -> None:
        """Block until the pending-op counter reaches zero."""
        self._check_waitable()
        with self._idle:
            self._idle.wait_for(lambda: self._pending_total == 0)

    def _check_waitable(self):
        if getattr(_worker_ctx, "active", False):
            raise StateError("engine closures must not call wait_* (deadlock rule)")

    def _check_open(self):
        if self._closed:
            raise StateError("engine is closed")

    # ----------------------------------------------------------- inspection

    @property
    def pending(self) -> int:
        with self._lock:
            return self._pending_total

    @property
    def executed(self) -> int:
        with self._lock:
            return self._executed

    def dump(self) -> str:
        """Text listing of pending ops with tag labels (diagnostics)."""
        lines = []
        with self._lock:
            lines.append(f"engine: {self._pending_total} pending, "
                         f"{self._executed} executed, {self.num_threads} threads")
            for seq in sorted(self._inflight):
                op = self._inflight[seq]
                r = ",".join(t.label or str(t.id) for t in op.reads)
                w = ",".join(t.label or str(t.id) for t in op.writes)
                lines.append(f"  op#{seq} {op.label or '<anon>'} reads=[{r}] writes=[{w}]")
        return "\n".join(lines)

    # -------------------------------------------------------------- cleanup

    def close(self) -> None:
        with self._idle:
            self._idle.wait_for(lambda: self._pending_total == 0)
            self._closed = True
        for _ in self._workers:
            self._ready.put(None)
        for w in self._workers:
            w.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ------------------------------------------------------------ default engine

_default_engine: Optional[Engine] = None
_default_lock = threading.Lock()


def default_engine() -> Engine:
    global _default_engine
    with _default_lock:
        if _default_engine is None or _default_engine._closed:
            _default_engine = Engine()
        return _default_engine


def set_default_engine(engine: Engine) -> None:
    global _default_engine
    with _default_lock:
        _default_engine = engine


def configure_default_engine(threads: int) -> Engine:
    """Replace the default engine with one of the requested pool size."""
    global _default_engine
    with _default_lock:
        if _default_engine is not None and not _default_engine._closed:
            _default_engine.close()
        _default_engine = Engine(threads=threads)
        return _default_engine
