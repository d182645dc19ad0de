"""Batching iterator with seeded shuffling and threaded prefetch.

The epoch's shuffled order is fixed up front with a splitmix64-seeded
Fisher-Yates pass, so batch contents depend only on (file, batch size,
seed) and never on prefetch depth or thread timing. The prefetch thread
assembles whole batches and hands them over through a bounded queue;
depth 0 assembles synchronously in the caller. The last partial batch is
dropped. reset() starts a new epoch with seed+1.
"""

from __future__ import annotations

import queue
import threading
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as tmod
from .engine import Engine
from .errors import ArgumentError
from .recordio import ExampleFile
from .tensor import Tensor

_MASK = (1 << 64) - 1


def splitmix64(seed: int) -> Iterator[int]:
    """Standard splitmix64 stream of u64 values."""
    state = seed & _MASK
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        yield z ^ (z >> 31)


def shuffled_order(n: int, seed: int) -> List[int]:
    """Fisher-Yates permutation of range(n) driven by splitmix64(seed)."""
    order = list(range(n))
    rng = splitmix64(seed)
    for i in range(n - 1, 0, -1):
        j = next(rng) % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


class BatchIterator:
    """Yields (features [B,D] float32, labels [B] float32) batches."""

    def __init__(self, path: str, batch_size: int, seed: int = 0,
                 prefetch: int = 2, shuffle: bool = True,
                 affine: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                 engine: Optional[Engine] = None):
        if batch_size < 1:
            raise ArgumentError("batch size must be >= 1")
        if prefetch < 0:
            raise ArgumentError("prefetch depth must be >= 0")
        self.path = path
        self.batch_size = batch_size
        self.seed = seed
        self.prefetch = prefetch
        self.shuffle = shuffle
        self.affine = affine
        self.engine = engine
        self._file = ExampleFile(path)
        self.dim = self._file.dim
        self.num_examples = len(self._file)
        self.batches_per_epoch = self.num_examples // batch_size
        self._start_epoch()

    # ------------------------------------------------------------- epoch run

    def _start_epoch(self):
        if self.shuffle:
            self._order = shuffled_order(self.num_examples, self.seed)
        else:
            self._order = list(range(self.num_examples))
        self._served = 0
        self._exhausted = False
        self._queue: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        if self.prefetch > 0:
            self._queue = queue.Queue(maxsize=self.prefetch)
            self._thread = threading.Thread(target=self._produce, daemon=True,
                                            name="minigraph-prefetch")
            self._thread.start()

    def _assemble(self, b: int) -> Tuple[np.ndarray, np.ndarray]:
        feats = np.empty((self.batch_size, self.dim), dtype=np.float32)
        labels = np.empty((self.batch_size,), dtype=np.float32)
        base = b * self.batch_size
        for k in range(self.batch_size):
            ex = self._file.read_at(self._order[base + k])
            feats[k] = ex.features
            labels[k] = ex.label
        if self.affine is not None:
            shift, scale = self.affine
            feats = (feats + np.asarray(shift, np.float32)) \
                * np.asarray(scale, np.float32)
        return feats, labels

    def _produce(self):
        for b in range(self.batches_per_epoch):
            self._queue.put(self._assemble(b))
        self._queue.put(None)

    def __iter__(self):
        return self

    def __next__(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._queue is not None:
            item = self._queue.get()
            if item is None:
                self._exhausted = True
                raise StopIteration
            return item
        if self._served >= self.batches_per_epoch:
            raise StopIteration
        batch = self._assemble(self._served)
        self._served += 1
        return batch

    def next_batch(self) -> Tuple[Tensor, Tensor]:
        """Next batch as lazy tensors; raises StopIteration at epoch end."""
        feats, labels = next(self)
        x = tmod.from_host(feats.shape, "float32", feats, engine=self.engine)
        y = tmod.from_host(labels.shape, "float32", labels, engine=self.engine)
        return x, y

    def _drain(self) -> None:
        # Let the producer finish before the order changes or the file closes.
        if self._thread is None:
            return
        if not self._exhausted:
            while self._queue.get() is not None:
                pass
        self._thread.join()

    def reset(self) -> None:
        """Begin the next epoch; the shuffle seed advances by one."""
        self._drain()
        self.seed += 1
        self._start_epoch()

    def close(self) -> None:
        self._drain()
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
