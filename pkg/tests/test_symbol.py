"""Symbolic graphs: construction, shapes, gradients, serialization."""

import numpy as np
import pytest

from conftest import random_dag, ref_forward
from minigraph import symbol
from minigraph.errors import ArgumentError, GraphParseError, InferenceError
from minigraph.symbol import SymbolGraph


def small_mlp():
    net = symbol.variable("data")
    net = symbol.apply("FullyConnected", {"num_hidden": 8}, [net], name="fc1")
    net = symbol.apply("Activation", {"act_type": "relu"}, [net], name="act1")
    net = symbol.apply("FullyConnected", {"num_hidden": 3}, [net], name="out")
    return symbol.apply("SoftmaxOutput", {}, [net], name="softmax")


def test_apply_auto_creates_trailing_variables():
    g = small_mlp()
    args = g.list_arguments()
    assert args == ["data", "fc1_weight", "fc1_bias", "out_weight",
                    "out_bias", "label"]


def test_variable_needs_name():
    with pytest.raises(ArgumentError):
        symbol.variable("")


def test_duplicate_names_rejected_by_planner():
    from minigraph.planner import plan_memory
    a = symbol.variable("x")
    g1 = symbol.apply("ScalarAdd", {"value": 1.0}, [a], name="n")
    g2 = symbol.apply("ScalarMul", {"value": 2.0}, [a], name="n")
    with pytest.raises(ArgumentError):
        plan_memory(symbol.group(g1, g2), {"x": (2,)}, strategy="none")


def test_infer_shape_mlp():
    g = small_mlp()
    args, outs = symbol.infer_shape(g, {"data": (16, 10), "label": (16,)})
    assert args["fc1_weight"] == (8, 10)
    assert args["fc1_bias"] == (8,)
    assert args["out_weight"] == (3, 8)
    assert outs["softmax"] == (16, 3)
    assert outs["fc1"] == (16, 8)


def test_infer_shape_reports_missing():
    g = small_mlp()
    with pytest.raises(InferenceError):
        symbol.infer_shape(g, {})


def test_infer_shape_rejects_contradiction():
    g = small_mlp()
    with pytest.raises(InferenceError):
        symbol.infer_shape(g, {"data": (16, 10), "fc1_weight": (8, 99)})


def test_save_load_round_trip():
    g = small_mlp()
    text = symbol.save(g)
    g2 = symbol.load(text)
    assert symbol.save(g2) == text
    assert g2.structural_hash() == g.structural_hash()
    assert g2.list_arguments() == g.list_arguments()


def test_save_load_round_trip_random_graphs():
    for seed in range(10):
        symbol.reset_names()
        g, feed = random_dag(seed)
        text = symbol.save(g)
        g2 = symbol.load(text)
        assert symbol.save(g2) == text
        want = ref_forward(g, feed)
        got = ref_forward(g2, feed)
        for w, x in zip(want, got):
            assert np.array_equal(w, x)


def test_load_rejects_garbage():
    with pytest.raises(GraphParseError):
        symbol.load("not a graph\n")
    with pytest.raises(GraphParseError):
        symbol.load("SGRAPH v1\nnode bogus stuff\n")


def test_group_multi_output():
    a = symbol.variable("a")
    s1 = symbol.apply("ScalarAdd", {"value": 1.0}, [a])
    s2 = symbol.apply("ScalarMul", {"value": 2.0}, [a])
    g = symbol.group(s1, s2)
    assert g.num_outputs == 2


def test_gradient_graph_shapes_match_arguments():
    g = small_mlp()
    gg = symbol.gradient(g, ["fc1_weight", "out_bias"])
    _args, outs = symbol.infer_shape(gg, {"data": (4, 5), "label": (4,)})
    names = [n.name for n, _slot in gg.outputs]
    assert outs[names[0]] == (8, 5)
    assert outs[names[1]] == (3,)


def test_gradient_unknown_argument():
    g = small_mlp()
    with pytest.raises(ArgumentError):
        symbol.gradient(g, ["nope"])


def test_backward_nodes_only_depend_on_used_values():
    # relu backward reads the output gradient and the forward output, so
    # its node must not pin the pre-activation input.
    net = symbol.variable("data")
    fc = symbol.apply("FullyConnected", {"num_hidden": 4}, [net], name="fc1")
    act = symbol.apply("Activation", {"act_type": "relu"}, [fc], name="act1")
    ends, _ = symbol.build_gradient(act, ["data"])
    bwd_of_act = [n for n in SymbolGraph(ends).topo_nodes()
                  if not n.is_variable and n.op == "Backward"
                  and n.attrs["of"] == "Activation"]
    assert bwd_of_act
    for n in bwd_of_act:
        assert n.attrs["roles"] == ["og", "out"]
        assert "fc1" not in {src.name for src, _ in n.inputs}


def test_to_dot_mentions_every_node():
    g = small_mlp()
    dot = symbol.to_dot(g)
    for n in g.topo_nodes():
        assert n.name in dot


def test_structural_hash_ignores_names():
    symbol.reset_names()
    a = symbol.apply("ScalarAdd", {"value": 1.0}, [symbol.variable("x")])
    symbol.reset_names()
    b = symbol.apply("ScalarAdd", {"value": 1.0}, [symbol.variable("x")])
    assert a.structural_hash() == b.structural_hash()
    c = symbol.apply("ScalarAdd", {"value": 2.0}, [symbol.variable("x")])
    assert c.structural_hash() != a.structural_hash()
