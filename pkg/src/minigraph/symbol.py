"""Declarative multi-output symbolic graphs.

Graphs are immutable DAGs of operator nodes and free variables; composing
never mutates existing structure (sub-graphs are shared by reference).
Includes shape inference, reverse-mode gradient-graph construction, a
line-oriented text serialization ("SGRAPH v1"), and dot export.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import ArgumentError, GraphParseError, InferenceError
from .ops import (OPS, OperatorDef, backward_inplace_pairs, backward_roles,
                  get_op, validate_attrs)

FORMAT_HEADER = "SGRAPH v1"


class Node:
    """One graph node: an operator application or a free variable."""

    __slots__ = ("op", "name", "attrs", "inputs")

    def __init__(self, op: Optional[str], name: str, attrs: dict,
                 inputs: Tuple[Tuple["Node", int], ...]):
        self.op = op              # None for variables
        self.name = name
        self.attrs = attrs        # treated as frozen
        self.inputs = inputs

    @property
    def is_variable(self) -> bool:
        return self.op is None

    def __repr__(self):
        kind = self.op or "var"
        return f"Node({kind}:{self.name})"


class _NameManager:
    def __init__(self):
        self._lock = threading.Lock()
        self._counters: Dict[str, itertools.count] = {}

    def next(self, prefix: str) -> str:
        with self._lock:
            c = self._counters.setdefault(prefix, itertools.count(1))
            return f"{prefix}{next(c)}"

    def reset(self):
        with self._lock:
            self._counters.clear()


_names = _NameManager()


def reset_names():
    """Reset automatic node-name counters (useful for deterministic tests)."""
    _names.reset()


class SymbolGraph:
    """Immutable handle on a set of output endpoints of a shared node DAG."""

    __slots__ = ("outputs", "_topo")

    def __init__(self, outputs: Sequence[Tuple[Node, int]]):
        self.outputs = tuple(outputs)
        self._topo: Optional[Tuple[Node, ...]] = None

    # ------------------------------------------------------------ structure

    def topo_nodes(self) -> Tuple[Node, ...]:
        """Deterministic topological order (inputs before consumers)."""
        if self._topo is None:
            order: List[Node] = []
            seen = set()

            def visit(node: Node):
                if id(node) in seen:
                    return
                seen.add(id(node))
                for src, _slot in node.inputs:
                    visit(src)
                order.append(node)

            for node, _slot in self.outputs:
                visit(node)
            self._topo = tuple(order)
        return self._topo

    def list_arguments(self) -> List[str]:
        """Free-variable names in topological order, head-grad seeds excluded."""
        return [n.name for n in self.topo_nodes()
                if n.is_variable and not n.attrs.get("head_grad")]

    def head_grad_names(self) -> List[str]:
        return [n.name for n in self.topo_nodes()
                if n.is_variable and n.attrs.get("head_grad")]

    def find(self, name: str) -> Node:
        for n in self.topo_nodes():
            if n.name == name:
                return n
        raise ArgumentError(f"no node named {name!r} in graph")

    def structural_hash(self) -> str:
        return hashlib.sha256(save(self).encode()).hexdigest()

    @property
    def num_outputs(self) -> int:
        return len(self.outputs)

    def __repr__(self):
        outs = ", ".join(f"{n.name}[{s}]" for n, s in self.outputs)
        return f"SymbolGraph({outs})"


# ------------------------------------------------------------- construction

def variable(name: str, **attrs) -> SymbolGraph:
    if not name:
        raise ArgumentError("variable needs a non-empty name")
    return SymbolGraph([(Node(None, name, attrs, ()), 0)])


def apply(op_name: str, attrs: Optional[dict] = None,
          inputs: Sequence[SymbolGraph] = (), name: Optional[str] = None) -> SymbolGraph:
    """Apply an operator to input symbols, returning a new graph.

    Missing trailing inputs (e.g. FullyConnected's weight and bias) are
    auto-created as variables named ``<node>_<input>``; a SoftmaxOutput
    label defaults to the plain name ``label``.
    """
    op = get_op(op_name)
    attrs = dict(attrs or {})
    validate_attrs(op, attrs)
    endpoints: List[Tuple[Node, int]] = []
    for g in inputs:
        if not isinstance(g, SymbolGraph):
            raise ArgumentError(f"{op_name}: inputs must be SymbolGraphs")
        if g.num_outputs != 1:
            raise ArgumentError(f"{op_name}: input symbol must be single-output")
        endpoints.append(g.outputs[0])
    if not op.variadic:
        if len(endpoints) > op.num_inputs:
            raise ArgumentError(
                f"{op_name} takes {op.num_inputs} inputs, got {len(endpoints)}")
    node_name = name or _names.next(op.prefix)
    if not op.variadic:
        for k in range(len(endpoints), op.num_inputs):
            arg = op.input_names[k]
            var_name = "label" if arg == "label" else f"{node_name}_{arg}"
            endpoints.append((Node(None, var_name, {}, ()), 0))
    elif not endpoints:
        raise ArgumentError(f"{op_name}: needs at least one input")
    return SymbolGraph([(Node(op_name, node_name, attrs, tuple(endpoints)), 0)])


def group(*symbols: SymbolGraph) -> SymbolGraph:
    outs: List[Tuple[Node, int]] = []
    for s in symbols:
        outs.extend(s.outputs)
    return SymbolGraph(outs)


# ---------------------------------------------------------- shape inference

def infer_shape(g: SymbolGraph, given: Dict[str, Sequence[int]]
                ) -> Tuple[Dict[str, tuple], Dict[str, tuple]]:
    """Forward-propagate shapes from the given partial map.

    Returns (complete argument-name -> shape map, node name -> output shape).
    Raises InferenceError naming the first node whose shapes are
    inconsistent or cannot be determined.
    """
    var_shapes: Dict[str, tuple] = {k: tuple(v) for k, v in given.items()}
    out_shapes: Dict[int, tuple] = {}
    named: Dict[str, tuple] = {}
    for node in g.topo_nodes():
        if node.is_variable:
            if node.name in var_shapes:
                out_shapes[id(node)] = var_shapes[node.name]
            continue
        op = get_op(node.op)
        in_shapes = []
        for src, _slot in node.inputs:
            if src.is_variable:
                in_shapes.append(var_shapes.get(src.name))
            else:
                in_shapes.append(out_shapes.get(id(src)))
        try:
            filled, outs = op.infer_shape(in_shapes, node.attrs)
        except InferenceError as exc:
            raise InferenceError(f"node {node.name!r}: {exc}") from None
        for (src, _slot), shape in zip(node.inputs, filled):
            if src.is_variable:
                prev = var_shapes.get(src.name)
                if prev is not None and prev != tuple(shape):
                    raise InferenceError(
                        f"node {node.name!r}: variable {src.name!r} inferred as "
                        f"{tuple(shape)} but already {prev}")
                var_shapes[src.name] = tuple(shape)
                out_shapes[id(src)] = tuple(shape)
        out_shapes[id(node)] = tuple(outs[0])
        named[node.name] = tuple(outs[0])
    missing = [n.name for n in g.topo_nodes()
               if n.is_variable and n.name not in var_shapes]
    if missing:
        raise InferenceError(f"undetermined variable shapes: {missing}")
    for n in g.topo_nodes():
        if n.is_variable:
            named[n.name] = var_shapes[n.name]
    args = {name: var_shapes[name] for name in
            [n.name for n in g.topo_nodes() if n.is_variable]}
    return args, named


# ----------------------------------------------------------- gradient graph

def build_gradient(g: SymbolGraph, wrt: Sequence[str]
                   ) -> Tuple[List[Tuple[Node, int]], List[Tuple[Node, Tuple[Node, int]]]]:
    """Reverse-mode construction of gradient endpoints for ``wrt`` names.

    Returns (gradient endpoints aligned with wrt, list of (head-grad
    variable node, output endpoint it seeds)). Loss heads (is_loss
    operators) seed themselves; every
    other graph output gets a head-grad variable (bound to ones by default
    at bind time). Fan-out contributions are summed.
    """
    topo = g.topo_nodes()
    known = {n.name for n in topo if n.is_variable}
    for name in wrt:
        if name not in known:
            raise ArgumentError(f"gradient: unknown argument {name!r}")

    contribs: Dict[int, List[Tuple[Node, int]]] = {}
    head_vars: List[Tuple[Node, Tuple[Node, int]]] = []
    for node, slot in g.outputs:
        if node.is_variable:
            raise ArgumentError("gradient of a bare variable output is not defined")
        if get_op(node.op).is_loss:
            continue
        hv = Node(None, f"{node.name}_head_grad", {"head_grad": True}, ())
        head_vars.append((hv, (node, slot)))
        contribs.setdefault(id(node), []).append((hv, 0))

    def summed(entries: List[Tuple[Node, int]]) -> Tuple[Node, int]:
        acc = entries[0]
        for nxt in entries[1:]:
            acc = (Node("ElementwiseAdd", _names.next("add"), {}, (acc, nxt)), 0)
        return acc

    grads_in: Dict[int, List[Tuple[Node, int]]] = {}
    for node in reversed(topo):
        if node.is_variable:
            continue
        op = get_op(node.op)
        entries = contribs.get(id(node), [])
        if not entries and not op.is_loss:
            continue
        if op.backward is None:
            raise ArgumentError(f"operator {node.op} is not differentiable")
        og = None if op.is_loss else summed(entries)
        for k, (src, src_slot) in enumerate(node.inputs):
            # Each Backward node depends only on the values its kernel reads,
            # so unused forward buffers stay reusable by the planner.
            roles, shape_role = backward_roles(op, k, len(node.inputs))
            inputs = []
            for role in roles:
                if role == "og":
                    inputs.append(og)
                elif role == "out":
                    inputs.append((node, 0))
                else:
                    inputs.append(node.inputs[int(role[2:])])
            battrs = {"of": node.op, "nin": len(node.inputs), "slot": k,
                      "roles": list(roles), "shape_role": shape_role,
                      "of_attrs": node.attrs}
            bnode = Node("Backward", _names.next("bwd"), battrs, tuple(inputs))
            contribs.setdefault(id(src), []).append((bnode, 0))

    result: List[Tuple[Node, int]] = []
    for name in wrt:
        var_node = next(n for n in topo if n.is_variable and n.name == name)
        entries = contribs.get(id(var_node), [])
        if entries:
            result.append(summed(entries))
        else:
            z = Node("ZerosLike", _names.next("zeros"), {}, ((var_node, 0),))
            result.append((z, 0))
    return result, head_vars


def gradient(g: SymbolGraph, wrt: Sequence[str]) -> SymbolGraph:
    """Augmented graph whose outputs are the gradients of the requested
    arguments (in ``wrt`` order); unreachable arguments yield zeros."""
    endpoints, _heads = build_gradient(g, wrt)
    return SymbolGraph(endpoints)


# ------------------------------------------------------------ serialization

def save(g: SymbolGraph) -> str:
    """Deterministic line-oriented text serialization."""
    topo = g.topo_nodes()
    index = {id(n): i for i, n in enumerate(topo)}
    lines = [FORMAT_HEADER]
    for i, n in enumerate(topo):
        attrs = json.dumps(n.attrs, sort_keys=True, separators=(",", ":"))
        if n.is_variable:
            lines.append(f"var {i} {n.name} {attrs}")
        else:
            edges = ",".join(f"{index[id(src)]}:{slot}" for src, slot in n.inputs)
            lines.append(f"op {i} {n.op} {n.name} [{edges}] {attrs}")
    outs = " ".join(f"{index[id(n)]}:{s}" for n, s in g.outputs)
    lines.append(f"outputs {outs}")
    return "\n".join(lines) + "\n"


def load(text: str) -> SymbolGraph:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise GraphParseError("line 1: expected header 'SGRAPH v1'")
    nodes: List[Node] = []
    outputs: Optional[List[Tuple[Node, int]]] = None

    def fail(lineno, msg):
        raise GraphParseError(f"line {lineno}: {msg}")

    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(" ", 4)
        kind = parts[0]
        try:
            if kind == "var":
                _, idx, name, attrs_json = line.split(" ", 3)
                if int(idx) != len(nodes):
                    fail(lineno, f"node index {idx} out of order")
                nodes.append(Node(None, name, json.loads(attrs_json), ()))
            elif kind == "op":
                _, idx, op_name, name, rest = line.split(" ", 4)
                if int(idx) != len(nodes):
                    fail(lineno, f"node index {idx} out of order")
                if op_name not in OPS:
                    fail(lineno, f"unknown operator {op_name!r}")
                edge_str, attrs_json = rest.split("] ", 1)
                edge_str = edge_str.lstrip("[")
                inputs = []
                if edge_str:
                    for e in edge_str.split(","):
                        src, slot = e.split(":")
                        src_i = int(src)
                        if src_i >= len(nodes):
                            fail(lineno, f"edge source {src_i} not yet defined")
                        inputs.append((nodes[src_i], int(slot)))
                nodes.append(Node(op_name, name, json.loads(attrs_json),
                                  tuple(inputs)))
            elif kind == "outputs":
                outputs = []
                for e in line.split(" ")[1:]:
                    src, slot = e.split(":")
                    outputs.append((nodes[int(src)], int(slot)))
            else:
                fail(lineno, f"unknown record {kind!r}")
        except GraphParseError:
            raise
        except Exception as exc:  # malformed ints/json/fields
            fail(lineno, f"malformed record: {exc}")
    if outputs is None:
        raise GraphParseError(f"line {len(lines)}: missing outputs record")
    return SymbolGraph(outputs)


def to_dot(g: SymbolGraph) -> str:
    """Graphviz dot text: one dot node per graph node, one edge per input."""
    topo = g.topo_nodes()
    index = {id(n): i for i, n in enumerate(topo)}
    lines = ["digraph symbolgraph {"]
    for i, n in enumerate(topo):
        if n.is_variable:
            lines.append(f'  n{i} [label="{n.name}" shape=ellipse];')
        else:
            lines.append(f'  n{i} [label="{n.name}\\n{n.op}" shape=box];')
    for i, n in enumerate(topo):
        for src, _slot in n.inputs:
            lines.append(f"  n{index[id(src)]} -> n{i};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------- memory estimate

def estimate_memory(g: SymbolGraph, given: Dict[str, Sequence[int]],
                    strategy: str = "both", etype: str = "float32") -> int:
    """Total internal-buffer bytes of the allocation plan for this graph,
    excluding bound arguments and requested outputs."""
    from .planner import plan_memory  # local import to avoid a cycle
    plan = plan_memory(g, given, strategy, etype=etype)
    return plan.total_internal_bytes
