"""Flat foreign-call boundary over tensors, symbols, and executors.

Every function returns an integer status and writes results into a
caller-supplied ``out`` list, mirroring a C-style out-parameter API.
Array payloads cross the boundary as little-endian float32 bytes. A
process-global registry maps opaque 64-bit handles to live objects;
each handle embeds a generation counter so stale or double-freed
handles produce an error status instead of touching a recycled slot.

Status codes: 0 ok, 1 bad handle, 2 bad argument, 3 internal error.
"""

from __future__ import annotations

import threading
from typing import Any, Dict, List, Optional

import numpy as np

from . import symbol, tensor as tmod
from .errors import ArgumentError, GraphParseError, MinigraphError
from .executor import Executor, bind
from .symbol import SymbolGraph
from .tensor import Tensor

OK = 0
BAD_HANDLE = 1
BAD_ARGUMENT = 2
INTERNAL = 3

_GEN_BITS = 32
_GEN_MASK = (1 << _GEN_BITS) - 1


class _Registry:
    """Slot table with per-slot generation counters. A handle is
    (slot index << 32) | generation; freeing bumps the generation so the
    old handle can never resolve again."""

    def __init__(self):
        self._lock = threading.Lock()
        self._slots: List[Optional[Any]] = []
        self._gens: List[int] = []
        self._free: List[int] = []

    def add(self, obj: Any) -> int:
        with self._lock:
            if self._free:
                idx = self._free.pop()
            else:
                idx = len(self._slots)
                self._slots.append(None)
                self._gens.append(1)
            self._slots[idx] = obj
            return (idx << _GEN_BITS) | (self._gens[idx] & _GEN_MASK)

    def get(self, handle: int, kind: type) -> Any:
        idx, gen = handle >> _GEN_BITS, handle & _GEN_MASK
        with self._lock:
            if not (0 <= idx < len(self._slots)) or self._gens[idx] != gen:
                raise KeyError(handle)
            obj = self._slots[idx]
        if obj is None or not isinstance(obj, kind):
            raise KeyError(handle)
        return obj

    def remove(self, handle: int, kind: type) -> Any:
        idx, gen = handle >> _GEN_BITS, handle & _GEN_MASK
        with self._lock:
            if (not (0 <= idx < len(self._slots)) or self._gens[idx] != gen
                    or not isinstance(self._slots[idx], kind)):
                raise KeyError(handle)
            obj = self._slots[idx]
            self._slots[idx] = None
            self._gens[idx] += 1
            self._free.append(idx)
        return obj

    def size(self) -> int:
        with self._lock:
            return sum(1 for s in self._slots if s is not None)


_registry = _Registry()
_last_error = threading.local()


def _fail(status: int, message: str) -> int:
    _last_error.message = message
    return status


def mg_last_error_message() -> str:
    return getattr(_last_error, "message", "")


def mg_handle_count() -> int:
    """Live handles; the scripted test suites assert this returns to 0."""
    return _registry.size()


def _guard(fn):
    def wrapped(*args):
        try:
            return fn(*args)
        except KeyError as exc:
            return _fail(BAD_HANDLE, f"stale or unknown handle {exc.args[0]}")
        except (ArgumentError, GraphParseError, ValueError, TypeError) as exc:
            return _fail(BAD_ARGUMENT, str(exc))
        except MinigraphError as exc:
            return _fail(INTERNAL, str(exc))
        except Exception as exc:  # noqa: BLE001 - boundary must not raise
            return _fail(INTERNAL, f"{type(exc).__name__}: {exc}")
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


def _shape(shape) -> tuple:
    if not hasattr(shape, "__iter__"):
        raise ArgumentError("shape must be a sequence of positive integers")
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise ArgumentError(f"bad shape {dims}")
    return dims


# -------------------------------------------------------------------- arrays

@_guard
def mg_nd_create(shape, data: bytes, out: List[int]) -> int:
    """New float32 tensor from little-endian bytes; empty data -> zeros."""
    dims = _shape(shape)
    if data:
        values = np.frombuffer(data, dtype="<f4")
        t = tmod.from_host(dims, "float32", values)
    else:
        t = tmod.zeros(dims)
    out.append(_registry.add(t))
    return OK


@_guard
def mg_nd_to_host(handle: int, out: List[Any]) -> int:
    """Appends the shape (list) and the value bytes (little-endian f32)."""
    t = _registry.get(handle, Tensor)
    arr = np.ascontiguousarray(tmod.to_host(t), dtype="<f4")
    out.append(list(t.shape))
    out.append(arr.tobytes())
    return OK


@_guard
def mg_nd_scalar_mul(handle: int, scalar: float, out: List[int]) -> int:
    t = _registry.get(handle, Tensor)
    r = tmod.Tensor(t.shape, t.etype, engine=t.engine)
    tmod.scalar_op("mul", t, float(scalar), r)
    out.append(_registry.add(r))
    return OK


@_guard
def mg_nd_free(handle: int) -> int:
    _registry.remove(handle, Tensor)
    return OK


# ------------------------------------------------------------------- symbols

@_guard
def mg_sym_variable(name: str, out: List[int]) -> int:
    out.append(_registry.add(symbol.variable(name)))
    return OK


@_guard
def mg_sym_apply(op_name: str, attrs: Dict[str, Any], input_handles,
                 name: Optional[str], out: List[int]) -> int:
    inputs = [_registry.get(h, SymbolGraph) for h in input_handles]
    g = symbol.apply(op_name, attrs or {}, inputs, name=name or None)
    out.append(_registry.add(g))
    return OK


@_guard
def mg_sym_save(handle: int, out: List[str]) -> int:
    g = _registry.get(handle, SymbolGraph)
    out.append(symbol.save(g))
    return OK


@_guard
def mg_sym_load(text: str, out: List[int]) -> int:
    out.append(_registry.add(symbol.load(text)))
    return OK


@_guard
def mg_sym_free(handle: int) -> int:
    _registry.remove(handle, SymbolGraph)
    return OK


# ----------------------------------------------------------------- executors

@_guard
def mg_exec_bind(sym_handle: int, arg_handles: Dict[str, int],
                 grad_handles: Dict[str, int], out: List[int]) -> int:
    """Bind argument tensors (and optional gradient sinks) to a symbol."""
    g = _registry.get(sym_handle, SymbolGraph)
    args = {n: _registry.get(h, Tensor) for n, h in arg_handles.items()}
    grads = {n: _registry.get(h, Tensor) for n, h in (grad_handles or {}).items()}
    reqs = {n: ("write" if n in grads else "none") for n in g.list_arguments()}
    ex = bind(g, args, reqs, grads or None)
    out.append(_registry.add(ex))
    return OK


@_guard
def mg_exec_forward(handle: int) -> int:
    _registry.get(handle, Executor).forward()
    return OK


@_guard
def mg_exec_backward(handle: int) -> int:
    _registry.get(handle, Executor).backward()
    return OK


@_guard
def mg_exec_outputs(handle: int, out: List[List[int]]) -> int:
    """Appends a list of fresh tensor handles, one per graph output."""
    ex = _registry.get(handle, Executor)
    out.append([_registry.add(t) for t in ex.outputs])
    return OK


@_guard
def mg_exec_free(handle: int) -> int:
    _registry.remove(handle, Executor)
    return OK
