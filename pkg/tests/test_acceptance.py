"""Acceptance sweep: one test per headline guarantee, each printing a
single PASS line with its measured figure and runtime.

These are the binding end-to-end checks; the per-module suites cover the
same components at finer grain.
"""

import time

import numpy as np
import pytest
from conftest import random_dag

from minigraph import symbol, tensor as tmod
from minigraph.datasets import pack_blobs
from minigraph.dataiter import BatchIterator
from minigraph.engine import Engine
from minigraph.executor import bind
from minigraph.fuzz import (random_program, rng_sequence, run_on_engine,
                            run_sequential)
from minigraph.kernels import cross_entropy_mean
from minigraph.optim import SGDConfig, sgd_step
from minigraph.planner import plan_memory, validate_plan
from minigraph.recordio import Example, RecordFile, pack, scan
from minigraph.symbol import SymbolGraph, infer_shape
from minigraph.train import (init_params, mlp, param_names, train_distributed,
                             train_local)

EPS = 1e-5


def report(name, detail, t0, budget):
    elapsed = time.perf_counter() - t0
    assert elapsed < budget, f"{name}: {elapsed:.1f}s over the {budget}s budget"
    print(f"PASS {name}: {detail} ({elapsed:.1f}s)")


# 1 ------------------------------------------------------- memory planning

def test_memory_plan_ratios():
    t0 = time.perf_counter()
    g = mlp([64] * 8, 10)
    given = {"data": (64, 64), "label": (64,)}

    wrt = [n for n in g.list_arguments() if n not in ("data", "label")]
    ends, _heads = symbol.build_gradient(g, wrt)
    comb = SymbolGraph(list(g.outputs) + ends)
    fwd_ids = {id(n) for n in g.topo_nodes()}
    phases = [0 if (n.is_variable or id(n) in fwd_ids) else 1
              for n in comb.topo_nodes()]
    full = (plan_memory(comb, given, strategy="both", phases=phases)
            .total_internal_bytes /
            plan_memory(comb, given, strategy="none", phases=phases)
            .total_internal_bytes)
    fwd = (plan_memory(g, given, strategy="both").total_internal_bytes /
           plan_memory(g, given, strategy="none").total_internal_bytes)
    assert full <= 0.50, full
    assert fwd <= 0.25, fwd
    report("memory-plan-ratios",
           f"fwd+bwd {full:.3f} <= 0.50, fwd-only {fwd:.3f} <= 0.25", t0, 1.0)


# 2 ------------------------------------------------------- planner validity

def test_plan_validity_500_dags():
    t0 = time.perf_counter()
    violations = 0
    for seed in range(500):
        symbol.reset_names()
        g, feed = random_dag(seed, max_ops=12)
        shapes = {k: v.shape for k, v in feed.items()}
        plan = plan_memory(g, shapes, strategy="both")
        violations += len(validate_plan(g, plan, shapes))
    assert violations == 0
    report("plan-validity", "500 random DAGs, 0 violations", t0, 60.0)


# 3 --------------------------------------------------- gradient correctness

def _central_diff(g, host, wrt, shapes, loss):
    def run(values, with_grads):
        args = {n: tmod.from_host(values[n].shape, "float64", values[n])
                for n in values}
        grads = {n: tmod.zeros(shapes[n], "float64") for n in wrt}
        ex = bind(g, args, {n: "write" for n in wrt}, grads)
        ex.forward()
        outs = [np.asarray(tmod.to_host(t)) for t in ex.outputs]
        val = loss(outs, values)
        if not with_grads:
            return val, None
        ex.backward()
        return val, {n: np.asarray(tmod.to_host(grads[n])).reshape(shapes[n])
                     for n in wrt}

    _, analytic = run(host, True)
    worst = 0.0
    for n in wrt:
        flat = host[n].ravel()
        for idx in range(0, flat.size, max(1, flat.size // 6)):
            orig = flat[idx]
            flat[idx] = orig + EPS
            up, _ = run(host, False)
            flat[idx] = orig - EPS
            dn, _ = run(host, False)
            flat[idx] = orig
            num = (up - dn) / (2 * EPS)
            ana = analytic[n].ravel()[idx]
            worst = max(worst, abs(num - ana) / max(1e-8, abs(num) + abs(ana)))
    return worst


OP_CASES = [
    ("FullyConnected", {"num_hidden": 3},
     {"x": (2, 4), "fc_weight": (3, 4), "fc_bias": (3,)}),
    ("Activation", {"act_type": "relu"}, {"x": (3, 4)}),
    ("Activation", {"act_type": "sigmoid"}, {"x": (3, 4)}),
    ("Activation", {"act_type": "tanh"}, {"x": (3, 4)}),
    ("ElementwiseAdd", {}, {"x": (3, 3), "y": (3, 3)}),
    ("ElementwiseMul", {}, {"x": (3, 3), "y": (3, 3)}),
    ("ScalarAdd", {"value": 1.5}, {"x": (2, 3)}),
    ("ScalarMul", {"value": -2.0}, {"x": (2, 3)}),
    ("MatMul", {}, {"x": (3, 4), "y": (4, 2)}),
    ("Flatten", {}, {"x": (2, 3, 2)}),
]


def test_gradients_all_ops_and_mlp():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rs = np.random.RandomState(seed)
        for op, attrs, shapes in OP_CASES:
            symbol.reset_names()
            if op == "FullyConnected":
                g = symbol.apply(op, attrs, [symbol.variable("x")], name="fc")
            else:
                g = symbol.apply(op, attrs,
                                 [symbol.variable(n) for n in shapes])
            host = {n: rs.randn(*s) for n, s in shapes.items()}
            if op == "Activation" and attrs["act_type"] == "relu":
                host["x"] += np.where(host["x"] >= 0, 0.5, -0.5)  # avoid kink
            w = _central_diff(g, host, list(shapes), shapes,
                              lambda outs, _v: float(sum(o.sum()
                                                         for o in outs)))
            worst = max(worst, w)

        symbol.reset_names()
        g = mlp([4], 3)
        shapes, _ = infer_shape(g, {"data": (3, 4), "label": (3,)})
        wrt = [n for n in g.list_arguments() if n != "label"]
        host = {n: rs.randn(*shapes[n]) for n in wrt}
        host["label"] = rs.randint(0, 3, 3).astype(np.float64)

        def mlp_loss(outs, values):
            probs = outs[0].reshape(3, 3)
            return cross_entropy_mean(probs, values["label"])

        worst = max(worst, _central_diff(g, host, wrt, shapes, mlp_loss))
    assert worst < 1e-6, worst
    report("gradient-checks",
           f"all ops + MLP, 20 seeds, worst rel err {worst:.2e}", t0, 30.0)


# 4 --------------------------------------------------- engine serializability

def test_engine_serializability():
    t0 = time.perf_counter()
    with Engine(threads=8) as engine:
        for seed in range(10000):
            program = random_program(seed, num_tags=16, num_steps=8)
            want = run_sequential(program, 16)
            got = run_on_engine(program, engine, 16)
            assert got == want, f"program {seed}"
        first = rng_sequence(7, 50, engine)
        for _ in range(99):
            assert rng_sequence(7, 50, engine) == first
    report("engine-serializability",
           "10000 fuzzed programs + 100 identical RNG runs", t0, 120.0)


# 5 ------------------------------------------- distributed bitwise equality

@pytest.fixture(scope="module")
def blobs_rec(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("accept") / "blobs.rec")
    pack_blobs(path, 256, classes=3, dim=6, seed=0)
    return path


def test_kvstore_sequential_equivalence(blobs_rec):
    t0 = time.perf_counter()
    cfg = SGDConfig(eta=0.1, momentum=0.9, weight_decay=1e-4)
    g = mlp([16], 3)
    _r, local = train_local(g, blobs_rec, cfg, epochs=5, batch=32)
    for machines, workers in ((1, 4), (2, 2)):
        _r, dist = train_distributed(g, blobs_rec, cfg, epochs=5, batch=32,
                                     machines=machines, workers=workers)
        for n in local:
            assert np.array_equal(local[n], dist[n]), (machines, workers, n)
    report("kvstore-sequential-equivalence",
           "M=1,W=4 and M=2,W=2 match local bitwise over 5 epochs", t0, 60.0)


# 6 --------------------------------------------------- lazy-eval interop

def _train_100_batches(engine, sync_every_op):
    symbol.reset_names()
    g = mlp([8], 3)
    batch, dim = 16, 5
    given = {"data": (batch, dim), "label": (batch,)}
    shapes, _ = infer_shape(g, given)
    params0 = init_params(g, shapes, seed=0)
    names = param_names(g)
    cfg = SGDConfig(eta=0.05, momentum=0.9, weight_decay=1e-4)

    args = {"data": tmod.zeros(given["data"], engine=engine),
            "label": tmod.zeros(given["label"], engine=engine)}
    for n in names:
        args[n] = tmod.from_host(shapes[n], "float32", params0[n],
                                 engine=engine)
    grads = {n: tmod.zeros(shapes[n], engine=engine) for n in names}
    vel = {n: tmod.zeros(shapes[n], engine=engine) for n in names}
    tmp = {n: tmod.zeros(shapes[n], engine=engine) for n in names}
    ex = bind(g, args, {n: "write" for n in names}, grads, engine=engine)

    rs = np.random.RandomState(3)
    for step in range(100):
        feats = rs.randn(batch, dim).astype(np.float32)
        labels = rs.randint(0, 3, batch).astype(np.float32)
        tmod.load_host(args["data"], feats)
        tmod.load_host(args["label"], labels)
        ex.forward()
        ex.backward()
        for n in names:
            sgd_step(args[n], grads[n], vel[n], tmp[n], cfg)
        if sync_every_op:
            engine.wait_all()
    engine.wait_all()
    return {n: np.array(args[n].arr) for n in names}


def test_lazy_interop_matches_eager():
    t0 = time.perf_counter()
    with Engine(threads=4) as lazy_engine:
        lazy = _train_100_batches(lazy_engine, sync_every_op=False)
    with Engine(threads=1) as eager_engine:
        eager = _train_100_batches(eager_engine, sync_every_op=True)
    for n in lazy:
        assert np.array_equal(lazy[n], eager[n]), n
    report("lazy-eval-interop",
           "100 interleaved imperative+symbolic batches match eager bitwise",
           t0, 60.0)


# 7 ----------------------------------------------------------- end to end

def test_blobs_convergence(tmp_path):
    t0 = time.perf_counter()
    cfg = SGDConfig(eta=0.1, momentum=0.9, weight_decay=1e-4)
    accs = []
    for seed in range(5):
        path = str(tmp_path / f"blobs{seed}.rec")
        pack_blobs(path, 256, classes=3, dim=6, seed=seed)
        g = mlp([16], 3)
        rep, _p = train_local(g, path, cfg, epochs=20, batch=32,
                              param_seed=seed, shuffle_seed=seed)
        best = max(row[2] for row in rep.rows)
        assert best >= 0.95, (seed, best)
        accs.append(best)
    report("end-to-end-convergence",
           f"seeds 0-4 reach >= 0.95 (min best {min(accs):.3f})", t0, 60.0)


# 8 ----------------------------------------------------------- data layer

def test_data_round_trip(tmp_path):
    t0 = time.perf_counter()
    rs = np.random.RandomState(0)
    examples = [Example(int(rs.randint(10)), rs.randn(8).astype(np.float32))
                for _ in range(10000)]
    path = str(tmp_path / "big.rec")
    pack(examples, path)

    back = list(scan(path))
    assert len(back) == 10000
    for a, b in zip(examples, back):
        assert a.label == b.label and np.array_equal(a.features, b.features)

    with RecordFile(path) as f:
        off = f._offsets[777]
    data = bytearray(open(path, "rb").read())
    corrupt = str(tmp_path / "corrupt.rec")
    data[off + 12] ^= 0xFF
    open(corrupt, "wb").write(bytes(data))
    import shutil
    from minigraph.errors import CorruptRecordError
    from minigraph.recordio import index_path
    shutil.copy(index_path(path), index_path(corrupt))
    with RecordFile(corrupt) as f:
        with pytest.raises(CorruptRecordError):
            f.read_record(777)

    def batches(depth):
        out = []
        with BatchIterator(path, 256, seed=1, prefetch=depth) as it:
            for feats, labels in it:
                out.append((feats.copy(), labels.copy()))
        return out

    want = batches(0)
    for depth in (1, 4):
        got = batches(depth)
        assert len(got) == len(want)
        for (fa, la), (fb, lb) in zip(want, got):
            assert np.array_equal(fa, fb) and np.array_equal(la, lb)
    report("data-round-trip",
           "10000 records: identity, crc detection, prefetch invariance",
           t0, 30.0)
