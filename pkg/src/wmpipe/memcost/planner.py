"""SRAM-constrained fusion planning.

Vertical fusion grows operator chains greedily while some square tile of the
chain's output still fits on chip together with every intermediate tile and
the chain's weights. Horizontal fusion concatenates sibling matmul weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import PlanError
from .cost import FusionGroup, FusionPlan, GroupKind
from .graph import OpGraph, OpKind, OpNode, SPATIAL_KINDS, TensorSpec

MIN_TILE = 8


def input_extent(node: OpNode, out_extent: int, limit: int) -> int:
    """Rows (or columns) of the input needed for ``out_extent`` output rows."""
    if node.kind is OpKind.CONV3X3:
        need = out_extent + 2
    elif node.kind is OpKind.UPSAMPLE:
        # +1 covers tiles whose first row is odd after an upstream halo.
        need = -(-out_extent // 2) + 1
    else:
        need = out_extent
    return min(need, limit)


def tile_extents(graph: OpGraph, node_ids, tile: int) -> dict:
    """Per-tensor (rows, cols) held on chip while computing one output tile."""
    nodes = [graph.by_id[i] for i in node_ids]
    out = graph.tensors[nodes[-1].output].dims
    extents = {nodes[-1].output: (min(tile, out[2]), min(tile, out[3]))}
    for node in reversed(nodes):
        eh, ew = extents[node.output]
        for t in node.inputs:
            dims = graph.tensors[t].dims
            need = (input_extent(node, eh, dims[2]), input_extent(node, ew, dims[3]))
            prev = extents.get(t, (0, 0))
            extents[t] = (max(prev[0], need[0]), max(prev[1], need[1]))
    return extents


def working_set_bytes(graph: OpGraph, node_ids, tile: int) -> int:
    extents = tile_extents(graph, node_ids, tile)
    total = 0
    for t, (eh, ew) in extents.items():
        spec = graph.tensors[t]
        n, c = spec.dims[0], spec.dims[1]
        total += n * c * eh * ew * spec.elem_bytes
    for i in node_ids:
        w = graph.by_id[i].weight
        if w is not None:
            total += w.size_bytes
    return total


def halo(graph: OpGraph, node_ids) -> int:
    return sum(graph.by_id[i].kind is OpKind.CONV3X3 for i in node_ids)


def tile_candidates(graph, node_ids):
    out = graph.tensors[graph.by_id[node_ids[-1]].output].dims
    top = max(MIN_TILE, 1 << math.ceil(math.log2(max(out[2], out[3]))))
    tiles, t = [], MIN_TILE
    while t <= top:
        tiles.append(t)
        t *= 2
    return tiles


def best_tile(graph, node_ids, s_sram):
    """Largest power-of-two tile whose working set fits, or None."""
    for tile in reversed(tile_candidates(graph, node_ids)):
        ws = working_set_bytes(graph, node_ids, tile)
        if ws <= s_sram:
            return tile, ws
    return None


def _extends(graph, chain, node):
    last = graph.by_id[chain[-1]]
    return (node.kind in SPATIAL_KINDS and last.output in node.inputs
            and len(graph.consumers[last.output]) == 1)


def plan_vertical_fusion(graph: OpGraph, s_sram) -> FusionPlan:
    if s_sram <= 0:
        raise PlanError("SRAM capacity must be positive")
    groups, notes = [], []
    chain = []

    def close():
        if not chain:
            return
        tile, ws = best_tile(graph, chain, s_sram)
        kind = GroupKind.VERTICAL if len(chain) > 1 else GroupKind.SINGLE
        groups.append(FusionGroup(tuple(chain), kind, tile, halo(graph, chain), ws))
        chain.clear()

    for node in graph.nodes:
        if node.kind not in SPATIAL_KINDS:
            close()
            groups.append(FusionGroup((node.id,)))
            continue
        if chain and _extends(graph, chain, node) and best_tile(graph, chain + [node.id], s_sram):
            chain.append(node.id)
            continue
        close()
        if best_tile(graph, [node.id], s_sram):
            chain.append(node.id)
        else:
            ws = working_set_bytes(graph, [node.id], MIN_TILE)
            notes.append(f"infeasible-fusion: {node.id} needs {ws} bytes at {MIN_TILE}x{MIN_TILE} "
                         f"tiles, SRAM holds {s_sram}")
            groups.append(FusionGroup((node.id,)))
    close()
    return FusionPlan(groups, s_sram, notes)


@dataclass(frozen=True)
class HorizontalFusion:
    node_ids: tuple
    fused_weight: TensorSpec
    launches_before: int
    launches_after: int
    flops: int
    bytes_before: int
    bytes_after: int
    ai_before_per_op: tuple
    ai_before: float
    ai_after: float

    def to_dict(self):
        return {
            "nodes": list(self.node_ids),
            "fused_weight": self.fused_weight.to_dict(),
            "launches_before": self.launches_before,
            "launches_after": self.launches_after,
            "flops": self.flops,
            "bytes_before": self.bytes_before,
            "bytes_after": self.bytes_after,
            "ai_before_per_op": list(self.ai_before_per_op),
            "ai_before": self.ai_before,
            "ai_after": self.ai_after,
        }


def plan_horizontal_fusion(graph: OpGraph, node_ids) -> HorizontalFusion:
    """Merge matmuls that read the same input into one wide matmul.

    Arithmetic intensity is FLOPs over input + weight + output bytes; the
    fused kernel reads the shared input once instead of once per launch.
    """
    nodes = [graph.by_id[i] for i in node_ids]
    if not nodes:
        raise PlanError("horizontal fusion needs at least one matmul")
    if any(n.kind is not OpKind.MATMUL for n in nodes):
        raise PlanError("horizontal fusion only applies to matmuls")
    if len({n.inputs for n in nodes}) != 1:
        raise PlanError("matmuls must share one input tensor")
    inner = {n.weight.dims[0] for n in nodes}
    if len(inner) != 1:
        raise PlanError(f"matmuls disagree on the inner dimension: {sorted(inner)}")
    in_bytes = graph.size(nodes[0].inputs[0])
    per_op_bytes = [in_bytes + n.weight.size_bytes + graph.size(n.output) for n in nodes]
    per_op_flops = [graph.flops(n) for n in nodes]
    flops = sum(per_op_flops)
    bytes_after = in_bytes + sum(n.weight.size_bytes + graph.size(n.output) for n in nodes)
    fused_w = TensorSpec((inner.pop(), sum(n.weight.dims[1] for n in nodes)), nodes[0].weight.elem_bytes)
    return HorizontalFusion(
        node_ids=tuple(node_ids),
        fused_weight=fused_w,
        launches_before=len(nodes),
        launches_after=1,
        flops=flops,
        bytes_before=sum(per_op_bytes),
        bytes_after=bytes_after,
        ai_before_per_op=tuple(f / b for f, b in zip(per_op_flops, per_op_bytes)),
        ai_before=flops / sum(per_op_bytes),
        ai_after=flops / bytes_after,
    )


def horizontal_sets(graph: OpGraph):
    """Groups of >= 2 matmuls sharing an input and inner dimension."""
    sets = {}
    for node in graph.nodes:
        if node.kind is OpKind.MATMUL:
            sets.setdefault((node.inputs, node.weight.dims[0]), []).append(node.id)
    return [tuple(ids) for ids in sets.values() if len(ids) > 1]


def plan_fusion(graph: OpGraph, s_sram) -> FusionPlan:
    """Vertical plan with sibling matmuls merged horizontally."""
    plan = plan_vertical_fusion(graph, s_sram)
    merged = {i: ids for ids in horizontal_sets(graph) for i in ids}
    groups, done = [], set()
    for g in plan.groups:
        first = g.nodes[0]
        if len(g.nodes) == 1 and first in merged:
            ids = merged[first]
            if ids not in done:
                done.add(ids)
                groups.append(FusionGroup(ids, GroupKind.HORIZONTAL))
            continue
        groups.append(g)
    return FusionPlan(groups, plan.s_sram, plan.notes)
