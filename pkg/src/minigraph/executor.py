"""Graph executor: binds symbolic graphs to tensors and runs them lazily.

bind() prunes the graph to the requested outputs, appends reverse-mode
gradient nodes for the requested arguments, plans shared storage with every
forward node scheduled ahead of every backward node, and materializes one
buffer per storage slot. forward()/backward() push node closures in a fixed
topological order of the graph plus the plan's extra ordering edges; the
shared per-slot write tags turn those edges into real engine dependencies.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

from . import tensor as tmod
from .engine import Engine, default_engine
from .errors import ArgumentError, StateError
from .ops import get_op
from .planner import AllocationPlan, plan_memory, prune
from .symbol import SymbolGraph, build_gradient, infer_shape
from .tensor import Buffer, ETYPES, Tensor

GRAD_REQS = ("none", "write", "add")


class Executor:
    """A bound graph: fixed tensors, fixed plan, re-pushable closures."""

    def __init__(self, g: SymbolGraph, args: Dict[str, Tensor],
                 grad_reqs: Dict[str, str], grads: Dict[str, Tensor],
                 outputs: Optional[Sequence[int]], strategy: str,
                 engine: Optional[Engine]):
        fg = prune(g, outputs)
        fargs = fg.list_arguments()

        for name, req in grad_reqs.items():
            if req not in GRAD_REQS:
                raise ArgumentError(f"bind: unknown grad_req {req!r} for {name!r}")
            if name not in fargs:
                raise ArgumentError(f"bind: grad_req for unknown argument {name!r}")
        wrt = [n for n in fargs if grad_reqs.get(n, "none") != "none"]

        if wrt:
            grad_eps, head_pairs = build_gradient(fg, wrt)
            combined = SymbolGraph(tuple(fg.outputs) + tuple(grad_eps))
        else:
            grad_eps, head_pairs = [], []
            combined = fg

        missing = [n for n in fargs if n not in args]
        if missing:
            raise ArgumentError(f"bind: missing argument tensors {missing}")
        known = set(fargs) | {hv.name for hv, _ in head_pairs}
        unknown = sorted(k for k in args if k not in known)
        if unknown:
            raise ArgumentError(f"bind: arguments not in graph: {unknown}")

        first = args[fargs[0]] if fargs else None
        if engine is None:
            engine = first.engine if first is not None else default_engine()
        etype = first.etype if first is not None else "float32"
        for name, t in args.items():
            if t.etype != etype:
                raise ArgumentError(f"bind: argument {name!r} etype {t.etype!r}, "
                                    f"expected {etype!r}")
            if t.engine is not engine:
                raise ArgumentError(f"bind: argument {name!r} is on another engine")

        given = {name: args[name].shape for name in fargs}
        _fshapes, fnamed = infer_shape(fg, given)
        for hv, (node, _slot) in head_pairs:
            given[hv.name] = fnamed[node.name]
        _cargs, cnamed = infer_shape(combined, given)

        topo = combined.topo_nodes()
        index = {id(n): i for i, n in enumerate(topo)}
        fwd_ids = {id(n) for n in fg.topo_nodes()}
        phase = [0 if (n.is_variable or id(n) in fwd_ids) else 1 for n in topo]

        plan = plan_memory(combined, given, strategy, etype=etype, phases=phase)

        node_tensor: List[Optional[Tensor]] = [None] * len(topo)
        for i, n in enumerate(topo):
            if not n.is_variable:
                continue
            t = args.get(n.name)
            if t is None and n.attrs.get("head_grad"):
                t = tmod.ones(cnamed[n.name], etype=etype, engine=engine)
            if t.shape != cnamed[n.name]:
                raise ArgumentError(
                    f"bind: argument {n.name!r} has shape {t.shape}, "
                    f"inferred {cnamed[n.name]}")
            node_tensor[i] = t

        self.outputs: List[Tensor] = []
        for node, _slot in fg.outputs:
            i = index[id(node)]
            if node_tensor[i] is None:
                node_tensor[i] = Tensor(cnamed[node.name], etype, engine=engine)
            self.outputs.append(node_tensor[i])

        self._add_pairs: List[tuple] = []
        self.grad_tensors: Dict[str, Tensor] = {}
        for name, (node, _slot) in zip(wrt, grad_eps):
            i = index[id(node)]
            req = grad_reqs[name]
            user = grads.get(name)
            if user is None:
                raise ArgumentError(
                    f"bind: grad_req {req!r} for {name!r} needs a gradient tensor")
            if user.shape != cnamed[node.name] or user.etype != etype:
                raise ArgumentError(
                    f"bind: gradient tensor for {name!r} must be shape "
                    f"{cnamed[node.name]} etype {etype!r}")
            if user.engine is not engine:
                raise ArgumentError(f"bind: gradient for {name!r} is on another engine")
            if node_tensor[i] is not None:
                raise StateError(
                    f"gradient endpoint for {name!r} shares a node with an output")
            if req == "write":
                node_tensor[i] = user
            else:
                staging = Tensor(cnamed[node.name], etype, engine=engine)
                node_tensor[i] = staging
                self._add_pairs.append((staging, user))
            self.grad_tensors[name] = user

        item = ETYPES[etype]().itemsize
        slot_buffers: Dict[int, Buffer] = {}
        slot_tags: Dict[int, object] = {}
        for i, n in enumerate(topo):
            if node_tensor[i] is not None:
                continue
            s = plan.slot_of[i]
            if s not in slot_buffers:
                slot_buffers[s] = Buffer(plan.slot_bytes[s] // item, ETYPES[etype])
                slot_tags[s] = engine.new_tag(f"slot{s}")
            node_tensor[i] = Tensor._view_of(
                slot_buffers[s], slot_tags[s], cnamed[n.name], etype, engine)

        # Topological order of graph + extra edges; forward phase pops first
        # because extra edges never point from a later phase to an earlier one.
        op_idx = [i for i, n in enumerate(topo) if not n.is_variable]
        opset = set(op_idx)
        succ = defaultdict(list)
        indeg = {i: 0 for i in op_idx}
        for i in op_idx:
            for src, _slot in topo[i].inputs:
                u = index[id(src)]
                if u in opset:
                    succ[u].append(i)
                    indeg[i] += 1
        for a, b in plan.extra_dep_edges:
            if a in opset and b in opset:
                succ[a].append(b)
                indeg[b] += 1
        heap = [(phase[i], i) for i in op_idx if indeg[i] == 0]
        heapq.heapify(heap)
        self._fwd_pushes: List[tuple] = []
        self._bwd_pushes: List[tuple] = []
        done = set()
        while heap:
            ph, i = heapq.heappop(heap)
            if i in done:
                continue
            done.add(i)
            n = topo[i]
            opdef = get_op(n.op)
            in_ts = [node_tensor[index[id(src)]] for src, _slot in n.inputs]
            out_t = node_tensor[i]

            def run(fwd=opdef.forward, ia=[t.arr for t in in_ts],
                    oa=out_t.arr, at=n.attrs):
                fwd(ia, oa, at)

            entry = (run, [t.tag for t in in_ts], [out_t.tag], f"{n.op}:{n.name}")
            (self._fwd_pushes if ph == 0 else self._bwd_pushes).append(entry)
            for c in succ[i]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, (phase[c], c))
        if len(done) != len(op_idx):
            raise StateError("bind: augmented graph is not acyclic")

        self.graph = combined
        self.plan: AllocationPlan = plan
        self.engine = engine
        self.etype = etype
        self.arg_tensors = dict(args)
        self.output_shapes = [cnamed[n.name] for n, _ in fg.outputs]
        self._fwd_count = 0
        self._bwd_count = 0

    # ------------------------------------------------------------- execution

    def forward(self) -> List[Tensor]:
        """Push one forward pass (lazy); returns the output tensors."""
        for run, reads, writes, label in self._fwd_pushes:
            self.engine.push(run, reads=reads, writes=writes, label=label)
        self._fwd_count += 1
        return list(self.outputs)

    def backward(self) -> None:
        """Push the gradient pass for the most recent forward (lazy)."""
        if not self.grad_tensors:
            raise StateError("executor was bound without gradient requests")
        if self._bwd_count >= self._fwd_count:
            raise StateError("backward without a matching forward")
        for run, reads, writes, label in self._bwd_pushes:
            self.engine.push(run, reads=reads, writes=writes, label=label)
        for staging, user in self._add_pairs:
            tmod.axpy(1.0, staging, user)
        self._bwd_count += 1


def bind(g: SymbolGraph, args: Dict[str, Tensor],
         grad_reqs: Optional[Dict[str, str]] = None,
         grads: Optional[Dict[str, Tensor]] = None,
         outputs: Optional[Sequence[int]] = None,
         strategy: str = "both",
         engine: Optional[Engine] = None) -> Executor:
    return Executor(g, args, grad_reqs or {}, grads or {}, outputs, strategy, engine)
