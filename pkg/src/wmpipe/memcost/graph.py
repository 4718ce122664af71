"""Operator DAG with explicit tensor shapes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from ..errors import GraphError


@dataclass(frozen=True)
class TensorSpec:
    dims: tuple
    elem_bytes: int = 2

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise GraphError(f"tensor extents must all be >= 1, got {self.dims}")
        if self.elem_bytes < 1:
            raise GraphError("elem_bytes must be >= 1")
        object.__setattr__(self, "dims", dims)

    @property
    def numel(self):
        return math.prod(self.dims)

    @property
    def size_bytes(self):
        return self.numel * self.elem_bytes

    def to_dict(self):
        return {"dims": list(self.dims), "elem_bytes": self.elem_bytes}


class OpKind(str, Enum):
    UPSAMPLE = "upsample_nearest2x"
    CONV3X3 = "conv3x3"
    GROUP_NORM = "group_norm"
    SILU = "silu"
    MATMUL = "matmul"
    ADD = "elementwise_add"


SPATIAL_KINDS = frozenset({OpKind.UPSAMPLE, OpKind.CONV3X3, OpKind.GROUP_NORM, OpKind.SILU, OpKind.ADD})


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: OpKind
    inputs: tuple
    output: str
    weight: Optional[TensorSpec] = None
    params: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def to_dict(self):
        return {
            "id": self.id,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "output": self.output,
            "weight": None if self.weight is None else self.weight.to_dict(),
            "params": dict(self.params),
        }


def _expect(cond, node, msg):
    if not cond:
        raise GraphError(f"node {node.id!r} ({node.kind.value}): {msg}")


def infer_output_dims(node: OpNode, in_dims: list) -> tuple:
    kind = node.kind
    if kind is OpKind.ADD:
        _expect(len(in_dims) == 2, node, "needs exactly two inputs")
        _expect(in_dims[0] == in_dims[1], node, f"input shapes differ: {in_dims[0]} vs {in_dims[1]}")
        return in_dims[0]
    _expect(len(in_dims) == 1, node, "needs exactly one input")
    x = in_dims[0]
    if kind is OpKind.MATMUL:
        _expect(node.weight is not None and len(node.weight.dims) == 2, node, "needs a (K, N) weight")
        k, n = node.weight.dims
        _expect(x[-1] == k, node, f"inner dimension {x[-1]} does not match weight rows {k}")
        return x[:-1] + (n,)
    _expect(len(x) == 4, node, f"expects an (N, C, H, W) activation, got {x}")
    if kind is OpKind.UPSAMPLE:
        _expect(node.weight is None, node, "takes no weight")
        return (x[0], x[1], 2 * x[2], 2 * x[3])
    if kind is OpKind.CONV3X3:
        w = node.weight
        _expect(w is not None and len(w.dims) == 4 and w.dims[2:] == (3, 3), node,
                "needs a (C_out, C_in, 3, 3) weight")
        _expect(w.dims[1] == x[1], node, f"weight expects {w.dims[1]} input channels, got {x[1]}")
        return (x[0], w.dims[0], x[2], x[3])
    if kind is OpKind.GROUP_NORM:
        groups = node.params.get("groups", 1)
        _expect(isinstance(groups, int) and groups >= 1 and x[1] % groups == 0, node,
                f"groups={groups} must divide {x[1]} channels")
        if node.weight is not None:
            _expect(node.weight.dims == (2, x[1]), node, "affine weight must be (2, C)")
        return x
    _expect(node.weight is None, node, "takes no weight")
    return x


def node_flops(node: OpNode, in_dims: list, out_dims: tuple) -> int:
    out = math.prod(out_dims)
    kind = node.kind
    if kind is OpKind.CONV3X3:
        return 2 * out * in_dims[0][1] * 9
    if kind is OpKind.MATMUL:
        return 2 * out * in_dims[0][-1]
    if kind is OpKind.GROUP_NORM:
        return 8 * out
    if kind is OpKind.SILU:
        return 4 * out
    if kind is OpKind.ADD:
        return out
    return 0


class OpGraph:
    """Validated operator DAG. Nodes are kept in topological order."""

    def __init__(self, tensors: dict, nodes: list):
        self.tensors = dict(tensors)
        nodes = list(nodes)
        self.producer = {}
        ids = set()
        for node in nodes:
            if node.id in ids:
                raise GraphError(f"duplicate node id {node.id!r}")
            ids.add(node.id)
            if node.output in self.producer:
                raise GraphError(f"tensor {node.output!r} has two producers")
            self.producer[node.output] = node
            for t in node.inputs + (node.output,):
                if t not in self.tensors:
                    raise GraphError(f"node {node.id!r} references unknown tensor {t!r}")
        self.nodes = self._toposort(nodes)
        self.by_id = {n.id: n for n in self.nodes}
        self.consumers = {t: [] for t in self.tensors}
        for node in self.nodes:
            for t in dict.fromkeys(node.inputs):
                self.consumers[t].append(node)
        for node in self.nodes:
            dims = infer_output_dims(node, [self.tensors[t].dims for t in node.inputs])
            if dims != self.tensors[node.output].dims:
                raise GraphError(
                    f"node {node.id!r}: output {node.output!r} declared {self.tensors[node.output].dims}, "
                    f"expected {dims}"
                )

    def _toposort(self, nodes):
        order, state = [], {}
        index = {n.id: n for n in nodes}

        def visit(node):
            mark = state.get(node.id)
            if mark == "done":
                return
            if mark == "active":
                raise GraphError(f"cycle through node {node.id!r}")
            state[node.id] = "active"
            for t in node.inputs:
                if t in self.producer:
                    visit(index[self.producer[t].id])
            state[node.id] = "done"
            order.append(node)

        for node in nodes:
            visit(node)
        return order

    @property
    def inputs(self):
        return [t for t in self.tensors if t not in self.producer and self.consumers[t]]

    @property
    def outputs(self):
        return [n.output for n in self.nodes if not self.consumers[n.output]]

    def flops(self, node: OpNode) -> int:
        return node_flops(node, [self.tensors[t].dims for t in node.inputs],
                          self.tensors[node.output].dims)

    def size(self, tensor_id) -> int:
        return self.tensors[tensor_id].size_bytes

    def to_dict(self):
        return {
            "tensors": {k: v.to_dict() for k, v in self.tensors.items()},
            "nodes": [n.to_dict() for n in self.nodes],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data):
        try:
            tensors = {k: TensorSpec(tuple(v["dims"]), v.get("elem_bytes", 2))
                       for k, v in data["tensors"].items()}
            nodes = []
            for n in data["nodes"]:
                w = n.get("weight")
                nodes.append(OpNode(
                    id=n["id"], kind=n["kind"], inputs=tuple(n["inputs"]), output=n["output"],
                    weight=None if w is None else TensorSpec(tuple(w["dims"]), w.get("elem_bytes", 2)),
                    params=dict(n.get("params", {})),
                ))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphError(f"malformed graph document: {exc}") from None
        return cls(tensors, nodes)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class GraphBuilder:
    """Shape-inferring helper for building graphs in code."""

    def __init__(self, elem_bytes=2):
        self.elem_bytes = elem_bytes
        self.tensors = {}
        self.nodes = []

    def input(self, name, dims):
        self.tensors[name] = TensorSpec(tuple(dims), self.elem_bytes)
        return name

    def _emit(self, kind, inputs, weight=None, params=None, name=None):
        node_id = name or f"{OpKind(kind).value}_{len(self.nodes)}"
        out = f"{node_id}.out"
        node = OpNode(node_id, kind, tuple(inputs), out, weight, dict(params or {}))
        dims = infer_output_dims(node, [self.tensors[t].dims for t in inputs])
        self.tensors[out] = TensorSpec(dims, self.elem_bytes)
        self.nodes.append(node)
        return out

    def upsample(self, x, name=None):
        return self._emit(OpKind.UPSAMPLE, [x], name=name)

    def conv3x3(self, x, c_out, name=None):
        c_in = self.tensors[x].dims[1]
        return self._emit(OpKind.CONV3X3, [x], TensorSpec((c_out, c_in, 3, 3), self.elem_bytes), name=name)

    def group_norm(self, x, groups, affine=True, name=None):
        c = self.tensors[x].dims[1]
        w = TensorSpec((2, c), self.elem_bytes) if affine else None
        return self._emit(OpKind.GROUP_NORM, [x], w, {"groups": groups}, name=name)

    def silu(self, x, name=None):
        return self._emit(OpKind.SILU, [x], name=name)

    def add(self, x, y, name=None):
        return self._emit(OpKind.ADD, [x, y], name=name)

    def matmul(self, x, n_out, name=None):
        k = self.tensors[x].dims[-1]
        return self._emit(OpKind.MATMUL, [x], TensorSpec((k, n_out), self.elem_bytes), name=name)

    def build(self) -> OpGraph:
        return OpGraph(self.tensors, self.nodes)


def vae_block(batch=1, channels=8, height=32, width=32, out_channels=None, groups=4, elem_bytes=2):
    """The decoder's Upsample -> Conv3x3 -> GroupNorm -> SiLU block."""
    b = GraphBuilder(elem_bytes)
    x = b.input("x", (batch, channels, height, width))
    y = b.upsample(x, name="upsample")
    y = b.conv3x3(y, out_channels or channels, name="conv")
    y = b.group_norm(y, groups, name="group_norm")
    b.silu(y, name="silu")
    return b.build()


def adaln_block(tokens=4096, hidden=1536, elem_bytes=2):
    """Three AdaLN projections (shift, scale, gate) reading one conditioning tensor."""
    b = GraphBuilder(elem_bytes)
    x = b.input("cond", (1, tokens, hidden))
    for name in ("shift", "scale", "gate"):
        b.matmul(x, hidden, name=name)
    return b.build()
