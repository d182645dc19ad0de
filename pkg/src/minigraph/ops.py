"""Operator definitions: shape inference, forward kernels, backward kernels.

All registered operators are single-output. Forward kernels write into
preallocated output arrays (which may alias an input when the operator
declares an in-place identity pair). Backward kernels produce one gradient
array per forward input from (inputs, outputs, output gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ArgumentError, InferenceError

Shape = tuple


@dataclass(frozen=True)
class OperatorDef:
    name: str
    prefix: str                      # auto-naming prefix for nodes
    input_names: tuple               # also drives auto-created variables
    attr_schema: dict                # attr name -> (type, required)
    infer_shape: Callable            # (in_shapes with None, attrs) -> (in, out)
    forward: Callable                # (in_arrays, out_array, attrs) -> None
    backward: Optional[Callable]     # (in_arrays, out_array, og, grad_arrays, attrs)
    inplace_identity: tuple = ()     # (input index, output index) pairs
    is_loss: bool = False            # supplies its own head gradient
    variadic: bool = False
    # slot -> (roles the backward kernel reads, role giving the grad shape).
    # Roles: "og", "out", "in<k>". None keeps every role (the default).
    backward_uses: Optional[Callable] = None

    @property
    def num_inputs(self):
        return len(self.input_names)


OPS: dict[str, OperatorDef] = {}


def register(op: OperatorDef):
    OPS[op.name] = op
    return op


def get_op(name: str) -> OperatorDef:
    if name not in OPS:
        raise ArgumentError(f"unknown operator {name!r}")
    return OPS[name]


def validate_attrs(op: OperatorDef, attrs: dict):
    schema = op.attr_schema
    if op.variadic:
        return
    for key in attrs:
        if key not in schema:
            raise ArgumentError(f"{op.name}: unknown attr {key!r}")
    for key, (typ, required) in schema.items():
        if key in attrs:
            if not isinstance(attrs[key], typ):
                raise ArgumentError(f"{op.name}: attr {key!r} must be {typ}")
        elif required:
            raise ArgumentError(f"{op.name}: missing required attr {key!r}")


def _need(shape, node, what):
    if shape is None:
        raise InferenceError(f"cannot infer {what} shape for node {node}")
    return shape


def _fill(slot_shape, new_shape, what):
    if slot_shape is not None and tuple(slot_shape) != tuple(new_shape):
        raise InferenceError(f"inconsistent {what} shape: {slot_shape} vs {new_shape}")
    return tuple(new_shape)


def _flat2(shape):
    return (shape[0], prod(shape[1:]))


# ----------------------------------------------------------- FullyConnected

def _fc_infer(shapes, attrs):
    h = attrs["num_hidden"]
    data = _need(shapes[0], "FullyConnected", "data")
    if len(data) < 2:
        raise InferenceError("FullyConnected: data must have rank >= 2")
    b, f = _flat2(data)
    weight = _fill(shapes[1], (h, f), "weight")
    bias = _fill(shapes[2], (h,), "bias")
    return [tuple(data), weight, bias], [(b, h)]


def _fc_forward(ins, out, attrs):
    x, w, b = ins
    x2 = x.reshape(_flat2(x.shape))
    res = kernels.det_matmul(x2, w.T)
    np.add(res, b, out=out)


def _fc_backward(ins, out, og, grads, attrs):
    x, w, _b = ins
    if grads[0] is not None:
        np.copyto(grads[0], kernels.det_matmul(og, w).reshape(grads[0].shape))
    if grads[1] is not None:
        np.copyto(grads[1], kernels.tree_outer(og, x.reshape(_flat2(x.shape))))
    if grads[2] is not None:
        np.copyto(grads[2], kernels.tree_sum(og))


def _fc_uses(slot, nin):
    # in1/in2 in slots 1/2 are shape sources only; they bind to argument
    # variables, which have dedicated storage anyway.
    return {0: (("og", "in0", "in1"), "in0"),
            1: (("og", "in0", "in1"), "in1"),
            2: (("og", "in2"), "in2")}[slot]


register(OperatorDef(
    name="FullyConnected", prefix="fc",
    input_names=("data", "weight", "bias"),
    attr_schema={"num_hidden": (int, True)},
    infer_shape=_fc_infer, forward=_fc_forward, backward=_fc_backward,
    backward_uses=_fc_uses,
))


# --------------------------------------------------------------- Activation

_ACTS = {
    "relu": (lambda x, o: np.maximum(x, 0, out=o),
             lambda y, og, g: np.multiply(og, y > 0, out=g)),
    "sigmoid": (lambda x, o: kernels.sigmoid(x, out=o),
                lambda y, og, g: np.copyto(g, og * y * (1 - y))),
    "tanh": (lambda x, o: np.tanh(x, out=o),
             lambda y, og, g: np.copyto(g, og * (1 - y * y))),
}


def _act_infer(shapes, attrs):
    if attrs["act_type"] not in _ACTS:
        raise InferenceError(f"unknown act_type {attrs['act_type']!r}")
    s = _need(shapes[0], "Activation", "data")
    return [tuple(s)], [tuple(s)]


def _act_forward(ins, out, attrs):
    _ACTS[attrs["act_type"]][0](ins[0], out)


def _act_backward(ins, out, og, grads, attrs):
    # Derivative is expressed through the forward output only.
    _ACTS[attrs["act_type"]][1](out, og, grads[0])


register(OperatorDef(
    name="Activation", prefix="act",
    input_names=("data",),
    attr_schema={"act_type": (str, True)},
    infer_shape=_act_infer, forward=_act_forward, backward=_act_backward,
    inplace_identity=((0, 0),),
    backward_uses=lambda slot, nin: (("og", "out"), "out"),
))


# ------------------------------------------------------------ SoftmaxOutput

def _softmax_infer(shapes, attrs):
    data = _need(shapes[0], "SoftmaxOutput", "data")
    if len(data) != 2:
        raise InferenceError("SoftmaxOutput: data must be (batch, classes)")
    label = _fill(shapes[1], (data[0],), "label")
    return [tuple(data), label], [tuple(data)]


def _softmax_forward(ins, out, attrs):
    kernels.softmax_rows(ins[0], out=out)


def _softmax_backward(ins, out, og, grads, attrs):
    # Loss head: emits (p - onehot) / batch regardless of og.
    label = ins[1]
    batch, classes = out.shape
    if grads[0] is not None:
        delta = out - kernels.one_hot(label, classes, out.dtype)
        np.true_divide(delta, out.dtype.type(batch), out=grads[0])
    if grads[1] is not None:
        grads[1].fill(0)


register(OperatorDef(
    name="SoftmaxOutput", prefix="softmax",
    input_names=("data", "label"),
    attr_schema={},
    infer_shape=_softmax_infer, forward=_softmax_forward,
    backward=_softmax_backward, is_loss=True,
    backward_uses=lambda slot, nin: {0: (("in1", "out"), "out"),
                                     1: (("in1",), "in1")}[slot],
))


# ------------------------------------------------- elementwise / scalar ops

def _same_shape_infer(n):
    def infer(shapes, attrs):
        known = [s for s in shapes if s is not None]
        if not known:
            raise InferenceError("elementwise: no input shape known")
        s = tuple(known[0])
        return [_fill(x, s, "operand") for x in shapes], [s]
    return infer


def _ew_add_fwd(ins, out, attrs):
    np.add(ins[0], ins[1], out=out)


def _ew_add_bwd(ins, out, og, grads, attrs):
    for g in grads:
        if g is not None:
            np.copyto(g, og)


def _ew_mul_fwd(ins, out, attrs):
    np.multiply(ins[0], ins[1], out=out)


def _ew_mul_bwd(ins, out, og, grads, attrs):
    a, b = ins
    if grads[0] is not None:
        np.copyto(grads[0], og * b)
    if grads[1] is not None:
        np.copyto(grads[1], og * a)


register(OperatorDef(
    name="ElementwiseAdd", prefix="add", input_names=("lhs", "rhs"),
    attr_schema={}, infer_shape=_same_shape_infer(2),
    forward=_ew_add_fwd, backward=_ew_add_bwd,
    inplace_identity=((0, 0), (1, 0)),
    backward_uses=lambda slot, nin: (("og",), "og"),
))

register(OperatorDef(
    name="ElementwiseMul", prefix="mul", input_names=("lhs", "rhs"),
    attr_schema={}, infer_shape=_same_shape_infer(2),
    forward=_ew_mul_fwd, backward=_ew_mul_bwd,
    inplace_identity=((0, 0), (1, 0)),
    backward_uses=lambda slot, nin: {0: (("og", "in1"), "og"),
                                     1: (("og", "in0"), "og")}[slot],
))


def _scalar_infer(shapes, attrs):
    s = _need(shapes[0], "scalar op", "data")
    return [tuple(s)], [tuple(s)]


def _sadd_fwd(ins, out, attrs):
    np.add(ins[0], ins[0].dtype.type(attrs["value"]), out=out)


def _sadd_bwd(ins, out, og, grads, attrs):
    if grads[0] is not None:
        np.copyto(grads[0], og)


def _smul_fwd(ins, out, attrs):
    np.multiply(ins[0], ins[0].dtype.type(attrs["value"]), out=out)


def _smul_bwd(ins, out, og, grads, attrs):
    if grads[0] is not None:
        np.multiply(og, og.dtype.type(attrs["value"]), out=grads[0])


register(OperatorDef(
    name="ScalarAdd", prefix="sadd", input_names=("data",),
    attr_schema={"value": ((int, float), True)},
    infer_shape=_scalar_infer, forward=_sadd_fwd, backward=_sadd_bwd,
    inplace_identity=((0, 0),),
    backward_uses=lambda slot, nin: (("og",), "og"),
))

register(OperatorDef(
    name="ScalarMul", prefix="smul", input_names=("data",),
    attr_schema={"value": ((int, float), True)},
    infer_shape=_scalar_infer, forward=_smul_fwd, backward=_smul_bwd,
    inplace_identity=((0, 0),),
    backward_uses=lambda slot, nin: (("og",), "og"),
))


# ------------------------------------------------------------------- MatMul

def _matmul_infer(shapes, attrs):
    a = _need(shapes[0], "MatMul", "lhs")
    b = _need(shapes[1], "MatMul", "rhs")
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise InferenceError(f"MatMul: incompatible shapes {a} @ {b}")
    return [tuple(a), tuple(b)], [(a[0], b[1])]


def _matmul_fwd(ins, out, attrs):
    kernels.det_matmul(ins[0], ins[1], out=out)


def _matmul_bwd(ins, out, og, grads, attrs):
    a, b = ins
    if grads[0] is not None:
        np.copyto(grads[0], kernels.det_matmul(og, b.T))
    if grads[1] is not None:
        np.copyto(grads[1], kernels.det_matmul(a.T, og))


register(OperatorDef(
    name="MatMul", prefix="matmul", input_names=("lhs", "rhs"),
    attr_schema={}, infer_shape=_matmul_infer,
    forward=_matmul_fwd, backward=_matmul_bwd,
    backward_uses=lambda slot, nin: {0: (("og", "in0", "in1"), "in0"),
                                     1: (("og", "in0", "in1"), "in1")}[slot],
))


# ------------------------------------------------------------------ Flatten

def _flatten_infer(shapes, attrs):
    s = _need(shapes[0], "Flatten", "data")
    if len(s) < 2:
        raise InferenceError("Flatten: data must have rank >= 2")
    return [tuple(s)], [_flat2(s)]


def _flatten_fwd(ins, out, attrs):
    np.copyto(out, ins[0].reshape(out.shape))


def _flatten_bwd(ins, out, og, grads, attrs):
    if grads[0] is not None:
        np.copyto(grads[0], og.reshape(grads[0].shape))


register(OperatorDef(
    name="Flatten", prefix="flatten", input_names=("data",),
    attr_schema={}, infer_shape=_flatten_infer,
    forward=_flatten_fwd, backward=_flatten_bwd,
    inplace_identity=((0, 0),),
    backward_uses=lambda slot, nin: (("og", "in0"), "in0"),
))


# ---------------------------------------------------------------- ZerosLike

def _zeros_infer(shapes, attrs):
    s = _need(shapes[0], "ZerosLike", "data")
    return [tuple(s)], [tuple(s)]


register(OperatorDef(
    name="ZerosLike", prefix="zeros", input_names=("data",),
    attr_schema={}, infer_shape=_zeros_infer,
    forward=lambda ins, out, attrs: out.fill(0),
    backward=lambda ins, out, og, grads, attrs: grads[0].fill(0),
    backward_uses=lambda slot, nin: (("in0",), "in0"),
))


# ------------------------------------------------------- FusedElementwise

# attrs["steps"]: list of step dicts. Step 0: {"op", "args": [ref, ref]} for
# binary ops or {"op", "args": [ref], "scalar": v} for scalar ops; later
# steps take the running chain value as one operand: {"op", "other": ref}
# or {"op", "scalar": v}. A ref is an integer index into the node inputs.

_FUSE_BIN = {"ElementwiseAdd": np.add, "ElementwiseMul": np.multiply}
_FUSE_SCALAR = {"ScalarAdd": np.add, "ScalarMul": np.multiply}
FUSABLE = set(_FUSE_BIN) | set(_FUSE_SCALAR)


def _fused_eval(ins, steps, record=None):
    cur = None
    for step in steps:
        op = step["op"]
        if cur is None:
            if op in _FUSE_BIN:
                cur = _FUSE_BIN[op](ins[step["args"][0]], ins[step["args"][1]])
            else:
                src = ins[step["args"][0]]
                cur = _FUSE_SCALAR[op](src, src.dtype.type(step["scalar"]))
        elif op in _FUSE_BIN:
            cur = _FUSE_BIN[op](cur, ins[step["other"]])
        else:
            cur = _FUSE_SCALAR[op](cur, cur.dtype.type(step["scalar"]))
        if record is not None:
            record.append(cur)
    return cur


def _fused_infer(shapes, attrs):
    known = [s for s in shapes if s is not None]
    if not known:
        raise InferenceError("FusedElementwise: no input shape known")
    s = tuple(known[0])
    return [_fill(x, s, "operand") for x in shapes], [s]


def _fused_fwd(ins, out, attrs):
    np.copyto(out, _fused_eval(ins, attrs["steps"]))


def _fused_bwd(ins, out, og, grads, attrs):
    # Recompute intermediates, then chain-rule back through the step list.
    steps = attrs["steps"]
    inter: list = []
    _fused_eval(ins, steps, record=inter)
    for g in grads:
        if g is not None:
            g.fill(0)

    def acc(i, val):
        if grads[i] is not None:
            grads[i] += val

    d = og
    for i in range(len(steps) - 1, -1, -1):
        step = steps[i]
        op = step["op"]
        prev = inter[i - 1] if i > 0 else None
        if i == 0:
            if op in _FUSE_BIN:
                a, b = step["args"]
                if op == "ElementwiseAdd":
                    acc(a, d)
                    acc(b, d)
                else:
                    acc(a, d * ins[b])
                    acc(b, d * ins[a])
            else:
                a = step["args"][0]
                if op == "ScalarAdd":
                    acc(a, d)
                else:
                    acc(a, d * ins[a].dtype.type(step["scalar"]))
            break
        if op in _FUSE_BIN:
            other = step["other"]
            if op == "ElementwiseAdd":
                acc(other, d)
            else:
                acc(other, d * prev)
                d = d * ins[other]
        elif op == "ScalarMul":
            d = d * d.dtype.type(step["scalar"])
        # ScalarAdd: d unchanged


register(OperatorDef(
    name="FusedElementwise", prefix="fused", input_names=(),
    attr_schema={"steps": (list, True)},
    infer_shape=_fused_infer, forward=_fused_fwd, backward=_fused_bwd,
    variadic=True,
))


# --------------------------------------------------------------- Backward

# A gradient node wrapping the backward kernel of a forward operator.
# attrs: {"of": op name, "slot": k, "nin": forward input count, "roles":
# which values this node takes as inputs (subset of "og", "in<i>", "out",
# in that order), "shape_role": the role whose shape is the output shape,
# "of_attrs": forward attrs}. The output is the gradient w.r.t. forward
# input ``slot``; gradients for other slots are not computed.

def backward_roles(op: "OperatorDef", slot: int, nin: int) -> tuple:
    """(roles, shape_role) the backward of ``op`` needs for ``slot``."""
    if op.backward_uses is not None:
        return op.backward_uses(slot, nin)
    roles = () if op.is_loss else ("og",)
    roles += tuple(f"in{i}" for i in range(nin)) + ("out",)
    return roles, f"in{slot}"


def _backward_infer(shapes, attrs):
    roles = attrs["roles"]
    what = f"{attrs['of']}.backward"
    filled = [_need(s, what, role) for role, s in zip(roles, shapes)]
    out_shape = tuple(filled[roles.index(attrs["shape_role"])])
    return [tuple(s) for s in filled], [out_shape]


def _backward_fwd(ins, out, attrs):
    of = get_op(attrs["of"])
    env = dict(zip(attrs["roles"], ins))
    fwd_in = [env.get(f"in{i}") for i in range(attrs["nin"])]
    grads = [None] * attrs["nin"]
    grads[attrs["slot"]] = out
    of.backward(fwd_in, env.get("out"), env.get("og"), grads,
                attrs.get("of_attrs", {}))


def backward_inplace_pairs(of_name: str, slot: int) -> tuple:
    """In-place identity pairs for a Backward node: ops whose gradient is
    the output gradient times a mask/constant may write it in place.
    For all of these the output gradient is input position 0."""
    if of_name in ("Activation", "ScalarAdd", "ScalarMul", "Flatten") and slot == 0:
        return ((0, 0),)
    if of_name in ("ElementwiseAdd",) and slot == 0:
        return ((0, 0),)
    return ()


register(OperatorDef(
    name="Backward", prefix="bwd", input_names=(),
    attr_schema={"of": (str, True), "nin": (int, True), "slot": (int, True),
                 "roles": (list, True), "shape_role": (str, True),
                 "of_attrs": (dict, False)},
    infer_shape=_backward_infer, forward=_backward_fwd, backward=None,
    variadic=True,
))
