"""Shared test helpers: random graphs, reference evaluation, datasets."""

import numpy as np
import pytest

from minigraph import symbol
from minigraph.ops import get_op
from minigraph.symbol import SymbolGraph


@pytest.fixture(autouse=True)
def _fresh_names():
    symbol.reset_names()
    yield


def ref_forward(g: SymbolGraph, values: dict, etype="float32") -> list:
    """Evaluate a graph directly with the operator kernels, no engine."""
    shapes = {k: np.asarray(v).shape for k, v in values.items()}
    arg_shapes, out_shapes = symbol.infer_shape(g, shapes)
    dtype = np.dtype(etype)
    env = {}
    for n in g.topo_nodes():
        if n.is_variable:
            env[id(n)] = np.asarray(values[n.name], dtype=dtype)
            continue
        op = get_op(n.op)
        ins = [env[id(src)] for src, _ in n.inputs]
        in_shapes = [a.shape for a in ins]
        _, (oshape,) = op.infer_shape(in_shapes, n.attrs)
        out = np.empty(oshape, dtype=dtype)
        op.forward(ins, out, n.attrs)
        env[id(n)] = out
    return [env[id(n)] for n, _slot in g.outputs]


def random_dag(seed: int, max_ops: int = 12) -> tuple:
    """(graph, feed dict) over (4, 4) tensors using shape-preserving ops."""
    rng = np.random.RandomState(seed)
    shape = (4, 4)
    pool = []
    feed = {}
    for v in range(rng.randint(1, 4)):
        name = f"x{v}"
        pool.append(symbol.variable(name))
        feed[name] = rng.randn(*shape).astype(np.float32)
    n_ops = rng.randint(1, max_ops + 1)
    for _ in range(n_ops):
        kind = rng.randint(0, 6)
        if kind == 0:
            a, b = pool[rng.randint(len(pool))], pool[rng.randint(len(pool))]
            pool.append(symbol.apply("ElementwiseAdd", {}, [a, b]))
        elif kind == 1:
            a, b = pool[rng.randint(len(pool))], pool[rng.randint(len(pool))]
            pool.append(symbol.apply("ElementwiseMul", {}, [a, b]))
        elif kind == 2:
            a = pool[rng.randint(len(pool))]
            pool.append(symbol.apply("ScalarAdd",
                                     {"value": float(rng.randn())}, [a]))
        elif kind == 3:
            a = pool[rng.randint(len(pool))]
            pool.append(symbol.apply("ScalarMul",
                                     {"value": float(rng.randn())}, [a]))
        elif kind == 4:
            a = pool[rng.randint(len(pool))]
            act = "relu" if rng.randint(2) else "sigmoid"
            pool.append(symbol.apply("Activation", {"act_type": act}, [a]))
        else:
            a, b = pool[rng.randint(len(pool))], pool[rng.randint(len(pool))]
            pool.append(symbol.apply("MatMul", {}, [a, b]))
    # Keep every sink plus a couple of random picks as requested outputs.
    used = set()
    for g in pool:
        for node in g.topo_nodes():
            for src, _ in node.inputs:
                used.add(id(src))
    outs = [g for g in pool
            if not g.outputs[0][0].is_variable
            and id(g.outputs[0][0]) not in used]
    extra = [g for g in pool if not g.outputs[0][0].is_variable]
    if extra:
        outs.append(extra[rng.randint(len(extra))])
    graph = symbol.group(*outs)
    feed = {k: v for k, v in feed.items() if k in graph.list_arguments()}
    return graph, feed
