"""HBM traffic accounting for unfused and fused execution.

Transactions are whole-tensor access events: one per tensor read and one per
tensor written by a kernel. Activation and weight traffic are kept apart so
the activation count can be compared directly with the kernel-level claim
(8 accesses unfused, 2 fused for the four-op decoder block).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from ..errors import PlanError
from .graph import OpGraph, OpKind, SPATIAL_KINDS


@dataclass(frozen=True)
class Cost:
    activation_bytes: int = 0
    weight_bytes: int = 0
    activation_transactions: int = 0
    weight_transactions: int = 0
    # Extra read charged for group-norm statistics inside fused groups.
    stats_bytes: int = 0
    stats_transactions: int = 0
    # Weight traffic if weights were re-streamed for every tile instead of staying resident.
    weight_bytes_per_tile_mode: int = 0

    @property
    def total_bytes(self):
        return self.activation_bytes + self.weight_bytes + self.stats_bytes

    @property
    def total_transactions(self):
        return self.activation_transactions + self.weight_transactions + self.stats_transactions

    def __add__(self, other):
        return Cost(*(a + b for a, b in zip(self._fields(), other._fields())))

    def _fields(self):
        return (self.activation_bytes, self.weight_bytes, self.activation_transactions,
                self.weight_transactions, self.stats_bytes, self.stats_transactions,
                self.weight_bytes_per_tile_mode)

    def to_dict(self):
        return {
            "activation_bytes": self.activation_bytes,
            "weight_bytes": self.weight_bytes,
            "stats_bytes": self.stats_bytes,
            "total_bytes": self.total_bytes,
            "activation_transactions": self.activation_transactions,
            "weight_transactions": self.weight_transactions,
            "stats_transactions": self.stats_transactions,
            "weight_bytes_per_tile_mode": self.weight_bytes_per_tile_mode,
        }


class GroupKind(str, Enum):
    SINGLE = "single"
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"


@dataclass(frozen=True)
class FusionGroup:
    nodes: tuple
    kind: GroupKind = GroupKind.SINGLE
    tile: Optional[int] = None  # square tile edge in output pixels
    halo: int = 0
    working_set_bytes: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "kind", GroupKind(self.kind))

    def to_dict(self):
        return {
            "nodes": list(self.nodes),
            "kind": self.kind.value,
            "tile": self.tile,
            "halo": self.halo,
            "working_set_bytes": self.working_set_bytes,
        }


@dataclass
class FusionPlan:
    groups: list
    s_sram: Optional[int] = None
    notes: list = field(default_factory=list)

    @classmethod
    def singletons(cls, graph: OpGraph):
        return cls([FusionGroup((n.id,)) for n in graph.nodes])

    @classmethod
    def from_partition(cls, graph, partition):
        groups = [FusionGroup(tuple(p), GroupKind.VERTICAL if len(p) > 1 else GroupKind.SINGLE)
                  for p in partition]
        return cls(groups)

    def to_dict(self):
        return {"s_sram": self.s_sram, "groups": [g.to_dict() for g in self.groups],
                "notes": list(self.notes)}

    @classmethod
    def from_dict(cls, data):
        try:
            groups = [FusionGroup(tuple(g["nodes"]), g.get("kind", "single"), g.get("tile"),
                                  g.get("halo", 0), g.get("working_set_bytes"))
                      for g in data["groups"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"malformed plan document: {exc}") from None
        return cls(groups, data.get("s_sram"), list(data.get("notes", [])))


def baseline_cost(graph: OpGraph) -> Cost:
    act = weight = act_tx = w_tx = 0
    for node in graph.nodes:
        act += sum(graph.size(t) for t in node.inputs) + graph.size(node.output)
        act_tx += len(node.inputs) + 1
        if node.weight is not None:
            weight += node.weight.size_bytes
            w_tx += 1
    return Cost(act, weight, act_tx, w_tx, weight_bytes_per_tile_mode=weight)


def external_io(graph: OpGraph, node_ids):
    """Tensors a group reads from and writes to HBM."""
    members = set(node_ids)
    produced = {graph.by_id[i].output for i in node_ids}
    ext_in = []
    for i in node_ids:
        for t in graph.by_id[i].inputs:
            if t not in produced and t not in ext_in:
                ext_in.append(t)
    ext_out = [
        graph.by_id[i].output for i in node_ids
        if not graph.consumers[graph.by_id[i].output]
        or any(c.id not in members for c in graph.consumers[graph.by_id[i].output])
    ]
    return ext_in, ext_out


def validate_plan(graph: OpGraph, plan: FusionPlan) -> None:
    seen = []
    for g in plan.groups:
        if not g.nodes:
            raise PlanError("empty fusion group")
        for i in g.nodes:
            if i not in graph.by_id:
                raise PlanError(f"plan references unknown node {i!r}")
        seen.extend(g.nodes)
    if sorted(seen) != sorted(graph.by_id) or len(set(seen)) != len(seen):
        raise PlanError("plan groups must partition the graph's nodes exactly once")
    for g in plan.groups:
        if len(g.nodes) == 1:
            continue
        if g.kind is GroupKind.HORIZONTAL:
            _validate_horizontal(graph, g)
        else:
            _validate_vertical(graph, g)


def _validate_vertical(graph, group):
    nodes = [graph.by_id[i] for i in group.nodes]
    for node in nodes:
        if node.kind not in SPATIAL_KINDS:
            raise PlanError(f"{node.kind.value} node {node.id!r} cannot join a vertical group")
    for prev, node in zip(nodes, nodes[1:]):
        if prev.output not in node.inputs:
            raise PlanError(f"vertical group is not a chain: {node.id!r} does not consume {prev.id!r}")
        consumers = graph.consumers[prev.output]
        if len(consumers) != 1:
            raise PlanError(f"intermediate {prev.output!r} is also read outside the group")


def _validate_horizontal(graph, group):
    nodes = [graph.by_id[i] for i in group.nodes]
    if any(n.kind is not OpKind.MATMUL for n in nodes):
        raise PlanError("horizontal groups may only contain matmuls")
    if len({n.inputs for n in nodes}) != 1:
        raise PlanError("horizontal group members must share one input tensor")
    if len({n.weight.dims[0] for n in nodes}) != 1:
        raise PlanError("horizontal group members must share the inner dimension")


def group_cost(graph: OpGraph, group: FusionGroup, n_tiles: int = 1) -> Cost:
    if len(group.nodes) == 1:
        return baseline_cost_of(graph, group.nodes)
    ext_in, ext_out = external_io(graph, group.nodes)
    nodes = [graph.by_id[i] for i in group.nodes]
    weights = [n.weight.size_bytes for n in nodes if n.weight is not None]
    stats = stats_tx = 0
    if group.kind is not GroupKind.HORIZONTAL:
        for n in nodes:
            if n.kind is OpKind.GROUP_NORM:
                stats += graph.size(n.inputs[0])
                stats_tx += 1
    return Cost(
        activation_bytes=sum(graph.size(t) for t in ext_in) + sum(graph.size(t) for t in ext_out),
        weight_bytes=sum(weights),
        activation_transactions=len(ext_in) + len(ext_out),
        weight_transactions=len(weights),
        stats_bytes=stats,
        stats_transactions=stats_tx,
        weight_bytes_per_tile_mode=sum(weights) * max(1, n_tiles),
    )


def baseline_cost_of(graph, node_ids) -> Cost:
    sub = Cost()
    for i in node_ids:
        node = graph.by_id[i]
        w = node.weight.size_bytes if node.weight is not None else 0
        sub = sub + Cost(
            sum(graph.size(t) for t in node.inputs) + graph.size(node.output), w,
            len(node.inputs) + 1, int(node.weight is not None), 0, 0, w,
        )
    return sub


def tile_count(graph, group) -> int:
    if group.tile is None:
        return 1
    out = graph.tensors[graph.by_id[group.nodes[-1]].output].dims
    h, w = out[-2], out[-1]
    return -(-h // group.tile) * -(-w // group.tile)


def fused_cost(graph: OpGraph, plan: FusionPlan) -> Cost:
    validate_plan(graph, plan)
    total = Cost()
    for g in plan.groups:
        total = total + group_cost(graph, g, tile_count(graph, g))
    return total


def group_report(graph: OpGraph, plan: FusionPlan) -> list:
    """Per-group rows: baseline vs fused bytes and transactions."""
    validate_plan(graph, plan)
    rows = []
    for index, g in enumerate(plan.groups):
        before = baseline_cost_of(graph, g.nodes)
        after = group_cost(graph, g, tile_count(graph, g))
        rows.append({
            "group": index,
            "kind": g.kind.value,
            "nodes": "+".join(g.nodes),
            "tile": "" if g.tile is None else g.tile,
            "halo": g.halo,
            "working_set_bytes": "" if g.working_set_bytes is None else g.working_set_bytes,
            "baseline_bytes": before.total_bytes,
            "fused_bytes": after.total_bytes,
            "transactions_before": before.activation_transactions,
            "transactions_after": after.activation_transactions,
        })
    return rows
