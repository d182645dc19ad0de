"""Momentum SGD, as engine tensor ops and as an ndarray mirror.

Both paths perform the same float operations in the same order, so a
server-side update on an aggregated gradient can be bit-identical to the
local tensor-op update. The update is

    v <- momentum * v - eta * (g + weight_decay * w)
    w <- w + v
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import kernels
from . import tensor as tmod
from .errors import ArgumentError
from .tensor import Tensor


@dataclass(frozen=True)
class SGDConfig:
    eta: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ArgumentError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ArgumentError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ArgumentError("weight decay must be >= 0")


def sgd_step(w: Tensor, g: Tensor, v: Tensor, tmp: Tensor,
             cfg: SGDConfig) -> None:
    """Schedule one update on the engine. ``v`` is the velocity state and
    ``tmp`` a scratch tensor, both owned by the caller."""
    for t in (g, v, tmp):
        if t.shape != w.shape:
            raise ArgumentError("sgd_step: all tensors must share one shape")
    tmod.copy_to(g, tmp)
    tmod.axpy(cfg.weight_decay, w, tmp)   # tmp = g + wd * w
    tmod.scalar_op("mul", v, cfg.momentum, v)
    tmod.axpy(-cfg.eta, tmp, v)           # v = mom*v - eta*tmp
    tmod.axpy(1.0, v, w)


def sgd_arrays(w: np.ndarray, g: np.ndarray, v: np.ndarray,
               cfg: SGDConfig) -> None:
    """ndarray mirror of sgd_step with identical float operation order."""
    dt = w.dtype.type
    tmp = g.copy()
    kernels.axpy_(dt(cfg.weight_decay), w, tmp)
    np.multiply(v, dt(cfg.momentum), out=v)
    kernels.axpy_(dt(-cfg.eta), tmp, v)
    kernels.axpy_(dt(1.0), v, w)


def make_sgd_updater(cfg: SGDConfig, scale: int = 1):
    """Key-value store updater running momentum SGD server-side.

    ``scale`` divides the incoming gradient; when workers each normalize by
    their shard size, the aggregate is scale times the whole-batch gradient
    and the division restores it exactly for power-of-two scales.
    """
    state: Dict[int, np.ndarray] = {}

    def updater(key: int, stored: np.ndarray, incoming: np.ndarray) -> None:
        v = state.setdefault(key, np.zeros_like(stored))
        g = incoming * stored.dtype.type(1.0 / scale)
        sgd_arrays(stored, g, v, cfg)

    return updater
