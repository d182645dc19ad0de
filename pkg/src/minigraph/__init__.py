"""minigraph: imperative tensors and declarative graphs on one scheduler.

Layers, bottom up: a mutation-aware dependency engine; lazy dense tensors;
single-output operators; immutable symbolic graphs with shape inference and
reverse-mode gradients; a static memory planner; an executor that binds the
two worlds together; a two-level key-value store for data-parallel training;
a checksummed record file format with a prefetching batch iterator; and a
small training CLI.
"""

from . import (capi, dataiter, datasets, engine, executor, fuzz, kernels,
               kvstore, ops, optim, planner, recordio, symbol, tensor, train,
               wire)
from .dataiter import BatchIterator
from .engine import Engine, configure_default_engine, default_engine
from .errors import (ArgumentError, CorruptRecordError, GraphParseError,
                     InferenceError, KVStoreError, LifecycleError,
                     MinigraphError, OperationFailed, PlanError,
                     RecordParseError, StateError)
from .executor import Executor, bind
from .kvstore import KVStore
from .optim import SGDConfig, sgd_step
from .planner import plan_memory, prune, fuse, validate_plan
from .recordio import Example, RecordFile, RecordWriter, pack, scan
from .symbol import (SymbolGraph, apply, group, gradient, infer_shape,
                     load, reset_names, save, to_dot, variable)
from .train import TrainReport, train_distributed, train_local
from .tensor import (Tensor, axpy, copy_to, elementwise, from_host,
                     load_host, matmul, ones, release, scalar_op, to_host,
                     zeros)

__version__ = "0.1.0"
