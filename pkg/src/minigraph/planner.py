"""Pre-execution graph transforms and static memory allocation.

Transforms: output-subgraph pruning and fusion of elementwise/scalar
chains. Allocation: the reference-count ("inplace") and serialized-path
("coshare") heuristics, plus their combination. Plans carry the extra
ordering edges that make buffer sharing safe; the executor turns those
into real engine dependencies by sharing write tags and pushing in a
topological order of the augmented graph.
"""

from __future__ import annotations

import heapq
import random
from collections import defaultdict
from dataclasses import dataclass, field
from math import prod
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .errors import ArgumentError, PlanError
from .ops import FUSABLE, backward_inplace_pairs, get_op
from .symbol import Node, SymbolGraph, _names, infer_shape

STRATEGIES = ("none", "inplace", "coshare", "both")

_ITEMSIZE = {"float32": 4, "float64": 8}


# ------------------------------------------------------------------- prune

def prune(g: SymbolGraph, outputs: Optional[Sequence[int]] = None) -> SymbolGraph:
    """Restrict the graph to the ancestor closure of the requested outputs
    (given as indices into ``g.outputs``; default: all)."""
    if outputs is None:
        outputs = range(len(g.outputs))
    endpoints = []
    for i in outputs:
        if not 0 <= i < len(g.outputs):
            raise ArgumentError(f"prune: no output {i} (graph has {len(g.outputs)})")
        endpoints.append(g.outputs[i])
    return SymbolGraph(endpoints)


# -------------------------------------------------------------------- fuse

def fuse(g: SymbolGraph) -> SymbolGraph:
    """Replace maximal chains of elementwise/scalar nodes whose
    intermediates have no external consumer by single fused nodes."""
    topo = g.topo_nodes()
    consumer_edges: Dict[int, int] = defaultdict(int)
    for n in topo:
        for src, _slot in n.inputs:
            consumer_edges[id(src)] += 1
    out_ids = {id(n) for n, _ in g.outputs}

    # next_link[id(src)] = consumer when src's value is the chain operand.
    next_link: Dict[int, Node] = {}
    pred: Dict[int, Node] = {}
    for m in topo:
        if m.is_variable or m.op not in FUSABLE:
            continue
        for src, _slot in m.inputs:
            if (not src.is_variable and src.op in FUSABLE
                    and consumer_edges[id(src)] == 1
                    and id(src) not in out_ids
                    and id(src) not in next_link
                    and id(m) not in pred):
                next_link[id(src)] = m
                pred[id(m)] = src
                break

    # Chains as ordered member lists keyed by tail node.
    tail_chain: Dict[int, List[Node]] = {}
    member_ids: Set[int] = set()
    for n in topo:
        if n.is_variable or n.op not in FUSABLE or id(n) in pred:
            continue
        chain = [n]
        while id(chain[-1]) in next_link:
            chain.append(next_link[id(chain[-1])])
        if len(chain) >= 2:
            tail_chain[id(chain[-1])] = chain
            member_ids.update(id(x) for x in chain)

    if not tail_chain:
        return g

    replaced: Dict[int, Node] = {}

    def remap(ep: Tuple[Node, int]) -> Tuple[Node, int]:
        return (replaced.get(id(ep[0]), ep[0]), ep[1])

    for n in topo:
        if id(n) in member_ids and id(n) not in tail_chain:
            continue
        if id(n) in tail_chain:
            chain = tail_chain[id(n)]
            ext: List[Tuple[Node, int]] = []
            ext_index: Dict[Tuple[int, int], int] = {}

            def ref(ep):
                ep = remap(ep)
                key = (id(ep[0]), ep[1])
                if key not in ext_index:
                    ext_index[key] = len(ext)
                    ext.append(ep)
                return ext_index[key]

            steps = []
            for i, member in enumerate(chain):
                op = member.op
                if i == 0:
                    if len(member.inputs) == 2:
                        steps.append({"op": op,
                                      "args": [ref(member.inputs[0]),
                                               ref(member.inputs[1])]})
                    else:
                        steps.append({"op": op, "args": [ref(member.inputs[0])],
                                      "scalar": member.attrs["value"]})
                else:
                    prev = chain[i - 1]
                    others = [ep for ep in member.inputs if ep[0] is not prev]
                    if len(member.inputs) == 2:
                        steps.append({"op": op, "other": ref(others[0])})
                    else:
                        steps.append({"op": op, "scalar": member.attrs["value"]})
            fused = Node("FusedElementwise", _names.next("fused"),
                         {"steps": steps}, tuple(ext))
            replaced[id(n)] = fused
        else:
            new_inputs = tuple(remap(ep) for ep in n.inputs)
            if any(a is not b or sa != sb
                   for (a, sa), (b, sb) in zip(new_inputs, n.inputs)):
                replaced[id(n)] = Node(n.op, n.name, n.attrs, new_inputs)

    return SymbolGraph([remap(ep) for ep in g.outputs])


# ---------------------------------------------------------- plan structures

@dataclass
class AllocationPlan:
    strategy: str
    slot_of: Dict[int, int]            # topo index -> storage slot
    slot_bytes: Dict[int, int]
    dedicated_slots: Set[int]          # argument / requested-output slots
    extra_dep_edges: List[Tuple[int, int]]
    total_internal_bytes: int
    node_names: List[str]
    visits: int = 0                    # instrumentation: node-visit counter

    def dump(self) -> str:
        lines = [f"# strategy={self.strategy} internal_bytes={self.total_internal_bytes}",
                 "node\tslot\tbytes"]
        for i, name in enumerate(self.node_names):
            s = self.slot_of.get(i)
            if s is None:
                continue
            mark = "*" if s in self.dedicated_slots else ""
            lines.append(f"{name}\t{s}{mark}\t{self.slot_bytes[s]}")
        return "\n".join(lines) + "\n"


class _View:
    """Flat, index-based view of a graph for planning and validation."""

    def __init__(self, g: SymbolGraph, given_shapes, etype: str,
                 outputs: Optional[Sequence[int]] = None):
        self.topo = g.topo_nodes()
        self.index = {id(n): i for i, n in enumerate(self.topo)}
        names = [n.name for n in self.topo]
        if len(set(names)) != len(names):
            raise ArgumentError("planner requires unique node names")
        _args, named = infer_shape(g, given_shapes)
        item = _ITEMSIZE[etype]
        out_eps = g.outputs if outputs is None else [g.outputs[i] for i in outputs]
        requested = {self.index[id(n)] for n, _ in out_eps}
        self.n = len(self.topo)
        self.is_var = [n.is_variable for n in self.topo]
        self.nbytes = []
        self.inputs: List[List[int]] = []
        self.dedicated = []
        self.inplace_positions: List[Tuple[int, ...]] = []
        self.names = [n.name for n in self.topo]
        for i, n in enumerate(self.topo):
            self.nbytes.append(prod(named[n.name]) * item)
            self.inputs.append([self.index[id(src)] for src, _ in n.inputs])
            self.dedicated.append(n.is_variable or i in requested)
            if n.is_variable:
                self.inplace_positions.append(())
            elif n.op == "Backward":
                pairs = backward_inplace_pairs(n.attrs["of"], n.attrs["slot"])
                self.inplace_positions.append(tuple(p for p, _o in pairs))
            else:
                self.inplace_positions.append(
                    tuple(p for p, _o in get_op(n.op).inplace_identity))
        self.consumers: List[List[int]] = [[] for _ in range(self.n)]
        for i in range(self.n):
            for u in self.inputs[i]:
                self.consumers[u].append(i)


# ------------------------------------------------------------- plan_memory

def plan_memory(g: SymbolGraph, given_shapes, strategy: str,
                etype: str = "float32",
                outputs: Optional[Sequence[int]] = None,
                phases: Optional[Sequence[int]] = None) -> AllocationPlan:
    """Allocate storage slots for the graph's internal outputs.

    ``phases`` (optional, one int per topo node) constrains scheduling so
    lower phases are fully allocated first; the executor uses it to keep
    every forward node ahead of every backward node.
    """
    if strategy not in STRATEGIES:
        raise ArgumentError(f"unknown strategy {strategy!r}")
    view = _View(g, given_shapes, etype, outputs)
    return _plan_view(view, strategy, phases)


def _plan_view(view: _View, strategy: str,
               phases: Optional[Sequence[int]] = None) -> AllocationPlan:
    visits = 0
    op_nodes = [i for i in range(view.n) if not view.is_var[i]]
    phase = list(phases) if phases is not None else [0] * view.n
    use_pool = strategy != "none"
    use_claims = strategy in ("inplace", "both")

    if strategy in ("coshare", "both"):
        order, v = _longest_path_order(view, op_nodes, phase)
        visits += v
    else:
        order = sorted(op_nodes, key=lambda i: (phase[i], i))

    slot_of: Dict[int, int] = {}
    slot_bytes: Dict[int, int] = {}
    dedicated_slots: Set[int] = set()
    next_slot = 0

    def fresh(i, dedicated):
        nonlocal next_slot
        s = next_slot
        next_slot += 1
        slot_of[i] = s
        slot_bytes[s] = view.nbytes[i]
        if dedicated:
            dedicated_slots.add(s)
        return s

    for i in range(view.n):
        if view.is_var[i]:
            fresh(i, True)

    refcount = [len(view.consumers[i]) for i in range(view.n)]
    pool: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
    transferred: Set[int] = set()
    extra: Set[Tuple[int, int]] = set()

    for v_idx in order:
        visits += 1
        placed = False
        if view.dedicated[v_idx]:
            fresh(v_idx, True)
            placed = True
        if not placed and use_claims:
            ins = view.inputs[v_idx]
            for pos in view.inplace_positions[v_idx]:
                u = ins[pos]
                if (not view.dedicated[u] and not view.is_var[u]
                        and refcount[u] == 1 and ins.count(u) == 1
                        and view.nbytes[u] == view.nbytes[v_idx]):
                    slot_of[v_idx] = slot_of[u]
                    transferred.add(u)
                    # Consumers of u that already ran must stay before v.
                    for c in view.consumers[u]:
                        visits += 1
                        if c != v_idx and c not in view.inputs[v_idx]:
                            extra.add((c, v_idx))
                    placed = True
                    break
        if not placed and use_pool:
            bucket = pool.get(view.nbytes[v_idx])
            if bucket:
                slot, owner = bucket.pop()
                slot_of[v_idx] = slot
                cons = view.consumers[owner]
                if cons:
                    for c in set(cons):
                        visits += 1
                        if c != v_idx and c not in view.inputs[v_idx]:
                            extra.add((c, v_idx))
                else:
                    if owner not in view.inputs[v_idx]:
                        extra.add((owner, v_idx))
                placed = True
        if not placed:
            fresh(v_idx, False)
        for u in set(view.inputs[v_idx]):
            visits += 1
            if view.dedicated[u]:
                continue
            refcount[u] -= view.inputs[v_idx].count(u)
            if refcount[u] == 0 and u not in transferred:
                pool[view.nbytes[u]].append((slot_of[u], u))

    total = sum(b for s, b in slot_bytes.items() if s not in dedicated_slots)
    edges = sorted(extra)
    _assert_acyclic(view, edges)
    return AllocationPlan(strategy=strategy, slot_of=slot_of,
                          slot_bytes=slot_bytes,
                          dedicated_slots=dedicated_slots,
                          extra_dep_edges=edges,
                          total_internal_bytes=total,
                          node_names=list(view.names), visits=visits)


def _longest_path_order(view: _View, op_nodes: List[int],
                        phase: List[int]) -> Tuple[List[int], int]:
    """Allocation order: among ready nodes, schedule the shallowest first
    (shortest remaining path to a sink; ties broken by topological index).
    Shallow consumers like bias or weight gradients then release their
    inputs before the main chain extends, so slots recycle sooner."""
    visits = 0
    depth = {i: 1 for i in op_nodes}
    opset = set(op_nodes)
    for i in reversed(op_nodes):
        visits += 1
        for c in view.consumers[i]:
            if c in opset and phase[c] == phase[i]:
                depth[i] = max(depth[i], 1 + depth[c])
    indeg = {i: sum(1 for u in view.inputs[i] if u in opset) for i in op_nodes}
    ready = [(phase[i], depth[i], i) for i in op_nodes if indeg[i] == 0]
    heapq.heapify(ready)
    order: List[int] = []
    while ready:
        _ph, _d, cur = heapq.heappop(ready)
        visits += 1
        order.append(cur)
        for c in view.consumers[cur]:
            visits += 1
            if c not in opset:
                continue
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, (phase[c], depth[c], c))
    if len(order) < len(op_nodes):
        raise PlanError("allocation scheduler stalled (cycle?)")
    return order, visits


def _assert_acyclic(view: _View, extra_edges):
    """Planner invariant: graph plus extra edges stays acyclic."""
    adj = defaultdict(list)
    indeg = defaultdict(int)
    nodes = range(view.n)
    for i in nodes:
        for u in view.inputs[i]:
            adj[u].append(i)
            indeg[i] += 1
    for a, b in extra_edges:
        adj[a].append(b)
        indeg[b] += 1
    stack = [i for i in nodes if indeg[i] == 0]
    seen = 0
    while stack:
        x = stack.pop()
        seen += 1
        for y in adj[x]:
            indeg[y] -= 1
            if indeg[y] == 0:
                stack.append(y)
    if seen != view.n:
        raise PlanError("extra dependency edges introduced a cycle")


# ------------------------------------------------------------ validate_plan

def validate_plan(g: SymbolGraph, plan: AllocationPlan, given_shapes,
                  etype: str = "float32",
                  outputs: Optional[Sequence[int]] = None,
                  exhaustive_nodes: int = 10, samples: int = 10000,
                  order_cap: int = 300000, seed: int = 0) -> List[str]:
    """Replay topological orders of graph + extra_dep_edges and report any
    overlapping-lifetime slot collision. Empty list means the plan is valid.

    Exhaustive for graphs up to ``exhaustive_nodes`` op nodes (bounded by
    ``order_cap`` enumerated orders); sampled otherwise.
    """
    view = _View(g, given_shapes, etype, outputs)
    op_nodes = [i for i in range(view.n) if not view.is_var[i]]
    succ = defaultdict(list)
    indeg0 = {i: 0 for i in op_nodes}
    opset = set(op_nodes)
    for i in op_nodes:
        for u in view.inputs[i]:
            if u in opset:
                succ[u].append(i)
                indeg0[i] += 1
    for a, b in plan.extra_dep_edges:
        if a in opset and b in opset:
            succ[a].append(b)
            indeg0[b] += 1

    # Cycle check on the augmented precedence.
    try:
        _check_dag(op_nodes, succ, indeg0)
    except PlanError:
        return ["cycle in graph plus extra_dep_edges"]

    violations: List[str] = []

    def replay(order) -> Optional[str]:
        live: Dict[int, List[int]] = {}  # slot -> [owner, remaining consumers]
        for v in order:
            for u in view.inputs[v]:
                if view.dedicated[u]:
                    continue
                entry = live.get(plan.slot_of[u])
                if entry is None or entry[0] != u:
                    prev = entry[0] if entry else None
                    prev_name = view.names[prev] if prev is not None else "<gone>"
                    return (f"value of {view.names[u]} overwritten by "
                            f"{prev_name} before its consumer {view.names[v]} ran")
                entry[1] -= 1
            if view.dedicated[v]:
                continue
            s = plan.slot_of[v]
            entry = live.get(s)
            if entry is not None and entry[0] != v and entry[1] > 0:
                return (f"slot collision: {view.names[v]} overwrites live value "
                        f"of {view.names[entry[0]]}")
            live[s] = [v, len(view.consumers[v])]
        return None

    if len(op_nodes) <= exhaustive_nodes:
        counter = [0]
        capped = [False]

        def backtrack(order, indeg, ready) -> bool:
            """Returns False to abort the enumeration."""
            if len(order) == len(op_nodes):
                counter[0] += 1
                msg = replay(order)
                if msg:
                    violations.append(msg)
                    return False
                if counter[0] >= order_cap:
                    capped[0] = True
                    return False
                return True
            for r in sorted(ready):
                nxt_ready = [x for x in ready if x != r]
                for c in succ[r]:
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        nxt_ready.append(c)
                order.append(r)
                ok = backtrack(order, indeg, nxt_ready)
                order.pop()
                for c in succ[r]:
                    indeg[c] += 1
                if not ok:
                    return False
            return True

        indeg = dict(indeg0)
        ready = [i for i in op_nodes if indeg[i] == 0]
        backtrack([], indeg, ready)
        if capped[0] and not violations:
            # Too many linear extensions to enumerate; fall back to sampling.
            _sample_orders(op_nodes, succ, indeg0, samples, seed, replay, violations)
    else:
        _sample_orders(op_nodes, succ, indeg0, samples, seed, replay, violations)
    return violations


def _sample_orders(op_nodes, succ, indeg0, samples, seed, replay, violations):
    rng = random.Random(seed)
    for _ in range(samples):
        indeg = dict(indeg0)
        ready = [i for i in op_nodes if indeg[i] == 0]
        order = []
        while ready:
            r = ready.pop(rng.randrange(len(ready)))
            order.append(r)
            for c in succ[r]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        msg = replay(order)
        if msg:
            violations.append(msg)
            return


def _check_dag(nodes, succ, indeg0):
    indeg = dict(indeg0)
    stack = [i for i in nodes if indeg[i] == 0]
    seen = 0
    while stack:
        x = stack.pop()
        seen += 1
        for y in succ[x]:
            indeg[y] -= 1
            if indeg[y] == 0:
                stack.append(y)
    if seen != len(nodes):
        raise PlanError("cycle")
