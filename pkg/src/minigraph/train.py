"""Training loops: single-process SGD and data-parallel SGD over the
key-value store.

Distributed equivalence contract: every worker iterates the same shuffled
batch order and takes a contiguous row shard of each global batch. Workers
push shard gradients (normalized by shard size); the server divides the
aggregate by the worker count and applies the same SGD float operations
the local loop uses. For power-of-two batch and worker counts this makes
sequential-mode training bitwise equal to local training on the full batch.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import symbol, tensor as tmod
from .dataiter import BatchIterator
from .engine import Engine, default_engine
from .errors import ArgumentError
from .executor import bind
from .kernels import cross_entropy_mean
from .kvstore import KVStore
from .optim import SGDConfig, make_sgd_updater, sgd_step
from .recordio import ExampleFile
from .symbol import SymbolGraph, infer_shape

RESERVED_ARGS = ("data", "label")

CSV_HEADER = "epoch,loss,acc,seconds,planner_bytes,engine_ops"


@dataclass
class TrainReport:
    rows: List[tuple] = field(default_factory=list)

    def append(self, epoch: int, loss: float, acc: float, seconds: float,
               planner_bytes: int, engine_ops: int) -> None:
        self.rows.append((epoch, loss, acc, seconds, planner_bytes, engine_ops))

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for e, loss, acc, sec, pb, ops in self.rows:
            # repr() round-trips floats so reruns compare bitwise.
            lines.append(f"{e},{loss!r},{acc!r},{sec:.3f},{pb},{ops}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())


def mlp(hidden: Sequence[int], classes: int) -> SymbolGraph:
    """Fully connected relu network ending in a softmax loss head."""
    net = symbol.variable("data")
    for i, h in enumerate(hidden, 1):
        net = symbol.apply("FullyConnected", {"num_hidden": int(h)}, [net],
                           name=f"fc{i}")
        net = symbol.apply("Activation", {"act_type": "relu"}, [net],
                           name=f"act{i}")
    net = symbol.apply("FullyConnected", {"num_hidden": int(classes)}, [net],
                       name="out")
    return symbol.apply("SoftmaxOutput", {}, [net], name="softmax")


def param_names(g: SymbolGraph) -> List[str]:
    return [n for n in g.list_arguments() if n not in RESERVED_ARGS]


def init_params(g: SymbolGraph, arg_shapes: Dict[str, tuple],
                seed: int) -> Dict[str, np.ndarray]:
    """Seeded initial values: scaled normal weights, zero biases."""
    rs = np.random.RandomState(seed)
    out = {}
    for name in param_names(g):
        shape = arg_shapes[name]
        if name.endswith("_bias"):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            out[name] = (rs.randn(*shape) * 0.1).astype(np.float32)
    return out


def _check_graph(g: SymbolGraph):
    args = g.list_arguments()
    for need in RESERVED_ARGS:
        if need not in args:
            raise ArgumentError(f"training graph needs a {need!r} argument")


# ----------------------------------------------------------------- local run

def train_local(g: SymbolGraph, data_path: str, cfg: SGDConfig, epochs: int,
                batch: int, strategy: str = "both", param_seed: int = 0,
                shuffle_seed: int = 0, prefetch: int = 2,
                engine: Optional[Engine] = None
                ) -> Tuple[TrainReport, Dict[str, np.ndarray]]:
    _check_graph(g)
    engine = engine or default_engine()
    report = TrainReport()
    with BatchIterator(data_path, batch, seed=shuffle_seed,
                       prefetch=prefetch, engine=engine) as it:
        if it.batches_per_epoch < 1:
            raise ArgumentError("batch size exceeds the dataset")
        given = {"data": (batch, it.dim), "label": (batch,)}
        arg_shapes, _ = infer_shape(g, given)
        params0 = init_params(g, arg_shapes, param_seed)
        names = param_names(g)

        args = {"data": tmod.zeros(given["data"], engine=engine),
                "label": tmod.zeros(given["label"], engine=engine)}
        for n in names:
            args[n] = tmod.from_host(arg_shapes[n], "float32", params0[n],
                                     engine=engine)
        grads = {n: tmod.zeros(arg_shapes[n], engine=engine) for n in names}
        vel = {n: tmod.zeros(arg_shapes[n], engine=engine) for n in names}
        tmp = {n: tmod.zeros(arg_shapes[n], engine=engine) for n in names}
        ex = bind(g, args, {n: "write" for n in names}, grads,
                  strategy=strategy, engine=engine)

        last_ops = engine.executed
        for epoch in range(epochs):
            t0 = time.perf_counter()
            losses: List[float] = []
            correct = 0
            seen = 0
            for feats, labels in it:
                tmod.load_host(args["data"], feats)
                tmod.load_host(args["label"], labels)
                ex.forward()
                ex.backward()
                for n in names:
                    sgd_step(args[n], grads[n], vel[n], tmp[n], cfg)
                probs = np.asarray(
                    tmod.to_host(ex.outputs[0]), dtype=np.float64
                ).reshape(batch, -1)
                losses.append(cross_entropy_mean(probs, labels))
                correct += int((probs.argmax(axis=1) == labels).sum())
                seen += batch
            it.reset()
            engine.wait_all()
            ops = engine.executed
            report.append(epoch, float(np.mean(losses)), correct / seen,
                          time.perf_counter() - t0,
                          ex.plan.total_internal_bytes, ops - last_ops)
            last_ops = ops
        engine.wait_all()
        params = {n: np.array(args[n].arr) for n in names}
    return report, params


# ----------------------------------------------------------- distributed run

def train_distributed(g: SymbolGraph, data_path: str, cfg: SGDConfig,
                      epochs: int, batch: int, machines: int = 1,
                      workers: int = 1, mode: str = "sequential",
                      strategy: str = "both", param_seed: int = 0,
                      shuffle_seed: int = 0, tcp: Optional[str] = None
                      ) -> Tuple[TrainReport, Dict[str, np.ndarray]]:
    _check_graph(g)
    nworkers = machines * workers
    if batch % nworkers:
        raise ArgumentError(f"batch {batch} not divisible by {nworkers} workers")
    shard = batch // nworkers

    with ExampleFile(data_path) as probe:
        dim = probe.dim
        nbatches = len(probe) // batch
    if nbatches < 1:
        raise ArgumentError("batch size exceeds the dataset")

    given = {"data": (shard, dim), "label": (shard,)}
    arg_shapes, _ = infer_shape(g, given)
    params0 = init_params(g, arg_shapes, param_seed)
    names = param_names(g)

    engine = Engine(threads=2 * nworkers + 6)
    kv = KVStore(machines, workers, mode, engine=engine, tcp=tcp)
    for i, n in enumerate(names):
        kv.init(i, params0[n])
    kv.set_updater(make_sgd_updater(cfg, scale=nworkers))

    barrier = threading.Barrier(nworkers)
    stats: List[List[Optional[tuple]]] = [[None] * nworkers for _ in range(epochs)]
    marks: List[tuple] = []
    plan_bytes = [0]
    failures: List[BaseException] = []

    def run_worker(gid: int):
        try:
            it = BatchIterator(data_path, batch, seed=shuffle_seed, prefetch=0)
            args = {"data": tmod.zeros(given["data"], engine=engine),
                    "label": tmod.zeros(given["label"], engine=engine)}
            for n in names:
                args[n] = tmod.from_host(arg_shapes[n], "float32", params0[n],
                                         engine=engine)
            grads = {n: tmod.zeros(arg_shapes[n], engine=engine) for n in names}
            ex = bind(g, args, {n: "write" for n in names}, grads,
                      strategy=strategy, engine=engine)
            if gid == 0:
                plan_bytes[0] = ex.plan.total_internal_bytes
            lo, hi = gid * shard, (gid + 1) * shard
            for epoch in range(epochs):
                losses: List[float] = []
                correct = 0
                for feats, labels in it:
                    for i, n in enumerate(names):
                        kv.pull(i, args[n], gid)
                    tmod.load_host(args["data"], feats[lo:hi])
                    tmod.load_host(args["label"], labels[lo:hi])
                    ex.forward()
                    ex.backward()
                    for i, n in enumerate(names):
                        kv.push(i, grads[n], gid)
                    probs = np.asarray(
                        tmod.to_host(ex.outputs[0]), dtype=np.float64
                    ).reshape(shard, -1)
                    losses.append(cross_entropy_mean(probs, labels[lo:hi]))
                    correct += int((probs.argmax(axis=1) == labels[lo:hi]).sum())
                it.reset()
                stats[epoch][gid] = (float(np.mean(losses)), correct,
                                     shard * nbatches)
                barrier.wait(timeout=300)
                if gid == 0:
                    marks.append((time.perf_counter(), engine.executed))
            it.close()
        except BaseException as exc:  # noqa: BLE001 - surfaced to the caller
            failures.append(exc)
            barrier.abort()

    t0 = time.perf_counter()
    ops0 = engine.executed
    threads = [threading.Thread(target=run_worker, args=(gid,),
                                name=f"train-worker-{gid}")
               for gid in range(nworkers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        kv.close()
        raise failures[0]

    engine.wait_all()
    if mode == "eventual":
        kv.quiesce()
    params = {}
    for i, n in enumerate(names):
        out = tmod.zeros(arg_shapes[n], engine=engine)
        kv.pull(i, out, worker=0)
        params[n] = np.asarray(
            tmod.to_host(out), dtype=np.float32).reshape(arg_shapes[n])

    report = TrainReport()
    prev_t, prev_ops = t0, ops0
    for epoch in range(epochs):
        loss = float(np.mean([s[0] for s in stats[epoch]]))
        correct = sum(s[1] for s in stats[epoch])
        seen = sum(s[2] for s in stats[epoch])
        mark_t, mark_ops = marks[epoch] if epoch < len(marks) else (prev_t, prev_ops)
        report.append(epoch, loss, correct / seen, mark_t - prev_t,
                      plan_bytes[0], mark_ops - prev_ops)
        prev_t, prev_ops = mark_t, mark_ops
    kv.close()
    engine.close()
    return report, params
