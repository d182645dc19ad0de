"""Imperative dense tensors, lazily scheduled on the dependency engine.

Every mutation is pushed as an engine op; handles are usable immediately.
``to_host`` is the synchronization point: it blocks until all pending work
on the tensor's tag is done and re-raises any captured failure.
"""

from __future__ import annotations

import math
import threading
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import kernels
from .engine import Engine, default_engine
from .errors import ArgumentError, LifecycleError

ETYPES = {"float32": np.float32, "float64": np.float64}

MAX_ELEMENTS = 2 ** 31

_alloc_lock = threading.Lock()
_alloc_count = 0


def buffer_allocations() -> int:
    """Test hook: number of Buffers allocated so far in this process."""
    return _alloc_count


def check_shape(shape: Sequence[int]) -> tuple:
    shape = tuple(int(d) for d in shape)
    if len(shape) < 1 or any(d < 1 for d in shape):
        raise ArgumentError(f"invalid shape {shape}: rank >= 1 and every dim >= 1")
    if math.prod(shape) > MAX_ELEMENTS:
        raise ArgumentError(f"shape {shape} exceeds {MAX_ELEMENTS} elements")
    return shape


class Buffer:
    """Contiguous storage region. Freed only via engine-scheduled deletion."""

    __slots__ = ("data", "alive")

    def __init__(self, nbytes_elems: int, dtype):
        global _alloc_count
        with _alloc_lock:
            _alloc_count += 1
        self.data = np.zeros(nbytes_elems, dtype=dtype)
        self.alive = True


class Tensor:
    """Dense n-dimensional array handle with an engine write-tag."""

    def __init__(self, shape, etype: str = "float32", device: int = 0,
                 engine: Optional[Engine] = None):
        if etype not in ETYPES:
            raise ArgumentError(f"unknown etype {etype!r}")
        self.shape = check_shape(shape)
        self.etype = etype
        self.device = device
        self.engine = engine or default_engine()
        self.buffer = Buffer(math.prod(self.shape), ETYPES[etype])
        self.tag = self.engine.new_tag(f"tensor@{id(self):x}")
        self.arr = self.buffer.data.reshape(self.shape)
        self._released = False

    # Internal constructor for executor-managed storage sharing a Buffer.
    @classmethod
    def _view_of(cls, buffer: Buffer, tag, shape, etype, engine, device=0):
        t = cls.__new__(cls)
        t.shape = check_shape(shape)
        t.etype = etype
        t.device = device
        t.engine = engine
        t.buffer = buffer
        t.tag = tag
        t.arr = buffer.data[: math.prod(t.shape)].reshape(t.shape)
        t._released = False
        return t

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * ETYPES[self.etype]().itemsize

    def _check_live(self):
        if self._released:
            raise LifecycleError("use of a released tensor handle")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, etype={self.etype}, device={self.device})"


# --------------------------------------------------------------- factories

def zeros(shape, etype: str = "float32", device: int = 0,
          engine: Optional[Engine] = None) -> Tensor:
    t = Tensor(shape, etype, device, engine)
    t.engine.push(lambda a=t.arr: a.fill(0), writes=[t.tag], label="zeros")
    return t


def ones(shape, etype: str = "float32", device: int = 0,
         engine: Optional[Engine] = None) -> Tensor:
    t = Tensor(shape, etype, device, engine)
    t.engine.push(lambda a=t.arr: a.fill(1), writes=[t.tag], label="ones")
    return t


def from_host(shape, etype: str = "float32", values: Iterable[float] = (),
              device: int = 0, engine: Optional[Engine] = None) -> Tensor:
    t = Tensor(shape, etype, device, engine)
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                      dtype=ETYPES[etype]).ravel()
    if vals.size != t.size:
        raise ArgumentError(
            f"from_host: {vals.size} values for shape {t.shape} ({t.size} elements)")
    t.engine.push(lambda a=t.arr, v=vals: np.copyto(a, v.reshape(a.shape)),
                  writes=[t.tag], label="from_host")
    return t


# -------------------------------------------------------------- operations

def to_host(t: Tensor) -> List[float]:
    """Synchronizing read: blocks until all pending ops on the tensor's tag
    complete, then returns a flat row-major copy."""
    t._check_live()
    t.engine.wait_for(t.tag)
    return t.arr.ravel().tolist()


def load_host(t: Tensor, values) -> None:
    """Scheduled overwrite of ``t`` with host values (lazy from_host)."""
    t._check_live()
    vals = np.asarray(values, dtype=ETYPES[t.etype]).ravel()
    if vals.size != t.size:
        raise ArgumentError(f"load_host: {vals.size} values for {t.size} elements")
    t.engine.push(lambda a=t.arr, v=vals: np.copyto(a, v.reshape(a.shape)),
                  writes=[t.tag], label="load_host")


_EW = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.true_divide,
}


def _check_binary(a: Tensor, b: Tensor, out: Tensor):
    for t in (a, b, out):
        t._check_live()
    if not (a.shape == b.shape == out.shape):
        raise ArgumentError(f"shape mismatch: {a.shape}, {b.shape}, {out.shape}")
    if not (a.etype == b.etype == out.etype):
        raise ArgumentError("all operands must share one element type")


def elementwise(op: str, a: Tensor, b: Tensor, out: Tensor) -> None:
    """Pointwise add/sub/mul/div; ``out`` may alias an input. IEEE-754
    semantics: div by zero yields inf/nan, no error."""
    if op not in _EW:
        raise ArgumentError(f"unknown elementwise op {op!r}")
    _check_binary(a, b, out)
    fn = _EW[op]

    def run(fn=fn, x=a.arr, y=b.arr, o=out.arr):
        with np.errstate(divide="ignore", invalid="ignore"):
            fn(x, y, out=o)

    out.engine.push(run, reads=[a.tag, b.tag], writes=[out.tag], label=f"ew:{op}")


def scalar_op(op: str, a: Tensor, c: float, out: Tensor) -> None:
    if op not in ("add", "mul"):
        raise ArgumentError(f"unknown scalar op {op!r}")
    for t in (a, out):
        t._check_live()
    if a.shape != out.shape or a.etype != out.etype:
        raise ArgumentError(f"shape/etype mismatch: {a.shape} vs {out.shape}")
    fn = np.add if op == "add" else np.multiply
    c = ETYPES[a.etype](c)
    out.engine.push(lambda x=a.arr, o=out.arr: fn(x, c, out=o),
                    reads=[a.tag], writes=[out.tag], label=f"scalar:{op}")


def matmul(a: Tensor, b: Tensor, out: Tensor) -> None:
    for t in (a, b, out):
        t._check_live()
    if len(a.shape) != 2 or len(b.shape) != 2 or len(out.shape) != 2:
        raise ArgumentError("matmul operands must be rank 2")
    m, k = a.shape
    k2, n = b.shape
    if k != k2 or out.shape != (m, n):
        raise ArgumentError(f"matmul dims: {a.shape} @ {b.shape} -> {out.shape}")
    if out.buffer is a.buffer or out.buffer is b.buffer:
        raise ArgumentError("matmul out must not alias an input")
    if not (a.etype == b.etype == out.etype):
        raise ArgumentError("all operands must share one element type")
    out.engine.push(lambda x=a.arr, y=b.arr, o=out.arr: kernels.det_matmul(x, y, out=o),
                    reads=[a.tag, b.tag], writes=[out.tag], label="matmul")


def axpy(alpha: float, x: Tensor, y: Tensor) -> None:
    """y <- y + alpha * x (the SGD primitive)."""
    for t in (x, y):
        t._check_live()
    if x.shape != y.shape or x.etype != y.etype:
        raise ArgumentError(f"axpy shape/etype mismatch: {x.shape} vs {y.shape}")
    alpha = ETYPES[x.etype](alpha)
    y.engine.push(lambda xv=x.arr, yv=y.arr: kernels.axpy_(alpha, xv, yv),
                  reads=[x.tag], writes=[y.tag], label="axpy")


def copy_to(src: Tensor, dst: Tensor) -> None:
    src._check_live()
    dst._check_live()
    if src is dst or src.buffer is dst.buffer:
        return  # no-op success
    if src.shape != dst.shape or src.etype != dst.etype:
        raise ArgumentError(f"copy shape/etype mismatch: {src.shape} vs {dst.shape}")
    dst.engine.push(lambda s=src.arr, d=dst.arr: np.copyto(d, s),
                    reads=[src.tag], writes=[dst.tag], label="copy")


def release(t: Tensor) -> None:
    """Schedule buffer deletion after all pending ops on the tensor's tag."""
    t._check_live()
    t._released = True
    buf = t.buffer

    def free():
        buf.alive = False
        buf.data = np.empty(0, dtype=buf.data.dtype)

    t.engine.push_delete(t.tag, on_delete=free)
