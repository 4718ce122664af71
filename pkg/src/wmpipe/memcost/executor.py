"""Desk-scale numpy executor for checking that tiled fusion is exact.

The unfused path runs every operator on whole tensors. The fused path runs
each vertical group tile by tile, pulling only the input region each tile
needs (halo included) and zero-padding only at true tensor borders. Group
norm inside a fused group takes its statistics from a separate global pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import EquivalenceFailure, GraphError
from .cost import FusionPlan, GroupKind, validate_plan
from .graph import OpGraph, OpKind

GN_EPS = 1e-5
MAX_DESK_EXTENT = 128


def random_inputs(graph: OpGraph, rng) -> dict:
    return {t: rng.standard_normal(graph.tensors[t].dims) for t in graph.inputs}


def random_weights(graph: OpGraph, rng) -> dict:
    weights = {}
    for node in graph.nodes:
        if node.weight is None:
            continue
        if node.kind is OpKind.GROUP_NORM:
            c = node.weight.dims[1]
            weights[node.id] = np.stack([1.0 + 0.1 * rng.standard_normal(c), 0.1 * rng.standard_normal(c)])
        else:
            fan_in = int(np.prod(node.weight.dims[1:])) if node.kind is OpKind.CONV3X3 else node.weight.dims[0]
            weights[node.id] = rng.standard_normal(node.weight.dims) / np.sqrt(fan_in)
    return weights


def silu(x):
    return x / (1.0 + np.exp(-x))


def upsample2x(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def conv3x3_valid(xp, w):
    """Correlation without padding: output is 2 smaller in each spatial dim."""
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def conv3x3(x, w):
    return conv3x3_valid(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))), w)


def gn_stats(x, groups):
    n, c = x.shape[:2]
    g = x.reshape(n, groups, -1)
    return g.mean(axis=2), g.var(axis=2)


def gn_apply(x, groups, mean, var, affine):
    n, c, h, w = x.shape
    g = x.reshape(n, groups, c // groups, h, w)
    y = (g - mean[:, :, None, None, None]) / np.sqrt(var[:, :, None, None, None] + GN_EPS)
    y = y.reshape(n, c, h, w)
    if affine is not None:
        y = y * affine[0][None, :, None, None] + affine[1][None, :, None, None]
    return y


def run_node(node, args, weights):
    kind = node.kind
    if kind is OpKind.UPSAMPLE:
        return upsample2x(args[0])
    if kind is OpKind.CONV3X3:
        return conv3x3(args[0], weights[node.id])
    if kind is OpKind.GROUP_NORM:
        groups = node.params.get("groups", 1)
        mean, var = gn_stats(args[0], groups)
        return gn_apply(args[0], groups, mean, var, weights.get(node.id))
    if kind is OpKind.SILU:
        return silu(args[0])
    if kind is OpKind.ADD:
        return args[0] + args[1]
    return args[0] @ weights[node.id]


def _check_desk_scale(graph):
    for t, spec in graph.tensors.items():
        if len(spec.dims) == 4 and max(spec.dims[2:]) > MAX_DESK_EXTENT:
            raise GraphError(f"tensor {t!r} exceeds the desk-scale limit of {MAX_DESK_EXTENT} per spatial dim")


class _TiledGroup:
    def __init__(self, graph, node_ids, env, weights):
        self.graph = graph
        self.nodes = [graph.by_id[i] for i in node_ids]
        self.producer = {n.output: n for n in self.nodes}
        self.env = env
        self.weights = weights
        self.stats = {}
        self.loaded = {}  # external tensor -> largest (rows, cols) fetched for one tile

    def global_stats(self):
        """Stats pass: materialise each group-norm input once, keep only its moments."""
        cache = {}

        def full(t):
            if t not in self.producer:
                return self.env[t]
            if t not in cache:
                node = self.producer[t]
                cache[t] = run_node(node, [full(i) for i in node.inputs], self.weights)
            return cache[t]

        for node in self.nodes:
            if node.kind is OpKind.GROUP_NORM:
                self.stats[node.id] = gn_stats(full(node.inputs[0]), node.params.get("groups", 1))

    def region(self, t, r0, r1, c0, c1):
        if t not in self.producer:
            prev = self.loaded.get(t, (0, 0))
            self.loaded[t] = (max(prev[0], r1 - r0), max(prev[1], c1 - c0))
            return self.env[t][:, :, r0:r1, c0:c1]
        node = self.producer[t]
        kind = node.kind
        if kind is OpKind.CONV3X3:
            h, w = self.graph.tensors[node.inputs[0]].dims[2:]
            lo_r, hi_r, lo_c, hi_c = max(r0 - 1, 0), min(r1 + 1, h), max(c0 - 1, 0), min(c1 + 1, w)
            x = self.region(node.inputs[0], lo_r, hi_r, lo_c, hi_c)
            pad = ((0, 0), (0, 0), (lo_r - (r0 - 1), (r1 + 1) - hi_r), (lo_c - (c0 - 1), (c1 + 1) - hi_c))
            return conv3x3_valid(np.pad(x, pad), self.weights[node.id])
        if kind is OpKind.UPSAMPLE:
            ir0, ir1 = r0 // 2, (r1 - 1) // 2 + 1
            ic0, ic1 = c0 // 2, (c1 - 1) // 2 + 1
            up = upsample2x(self.region(node.inputs[0], ir0, ir1, ic0, ic1))
            dr, dc = r0 - 2 * ir0, c0 - 2 * ic0
            return up[:, :, dr:dr + (r1 - r0), dc:dc + (c1 - c0)]
        args = [self.region(i, r0, r1, c0, c1) for i in node.inputs]
        if kind is OpKind.GROUP_NORM:
            mean, var = self.stats[node.id]
            return gn_apply(args[0], node.params.get("groups", 1), mean, var, self.weights.get(node.id))
        return run_node(node, args, self.weights)

    def run(self, tile):
        self.global_stats()
        last = self.nodes[-1].output
        n, c, h, w = self.graph.tensors[last].dims
        out = np.empty((n, c, h, w))
        for r0 in range(0, h, tile):
            for c0 in range(0, w, tile):
                r1, c1 = min(r0 + tile, h), min(c0 + tile, w)
                out[:, :, r0:r1, c0:c1] = self.region(last, r0, r1, c0, c1)
        return out


def execute_reference(graph: OpGraph, inputs: dict, plan: FusionPlan = None, weights: dict = None,
                      trace_loads: dict = None) -> dict:
    """Run the graph and return its output tensors.

    Without a plan every operator runs on whole tensors. With a plan, vertical
    groups execute tile by tile and horizontal groups as one wide matmul.
    ``trace_loads`` (if given) receives the per-group external input extents
    actually fetched per tile.
    """
    _check_desk_scale(graph)
    weights = weights or {}
    env = {t: np.asarray(inputs[t], dtype=float) for t in graph.inputs}
    for t, arr in env.items():
        if arr.shape != graph.tensors[t].dims:
            raise GraphError(f"input {t!r} has shape {arr.shape}, expected {graph.tensors[t].dims}")
    if plan is None:
        for node in graph.nodes:
            env[node.output] = run_node(node, [env[t] for t in node.inputs], weights)
        return {t: env[t] for t in graph.outputs}

    validate_plan(graph, plan)
    group_of = {i: g for g in plan.groups for i in g.nodes}
    done = set()
    for node in graph.nodes:
        g = group_of[node.id]
        if g.nodes in done:
            continue
        done.add(g.nodes)
        if g.kind is GroupKind.HORIZONTAL and len(g.nodes) > 1:
            members = [graph.by_id[i] for i in g.nodes]
            fused = np.concatenate([weights[m.id] for m in members], axis=1)
            y = env[members[0].inputs[0]] @ fused
            col = 0
            for m in members:
                width = m.weight.dims[1]
                env[m.output] = y[..., col:col + width]
                col += width
        elif g.tile is not None and all(graph.by_id[i].kind is not OpKind.MATMUL for i in g.nodes):
            tiled = _TiledGroup(graph, g.nodes, env, weights)
            env[graph.by_id[g.nodes[-1]].output] = tiled.run(g.tile)
            if trace_loads is not None:
                trace_loads[g.nodes] = dict(tiled.loaded)
        else:
            for i in g.nodes:
                m = graph.by_id[i]
                env[m.output] = run_node(m, [env[t] for t in m.inputs], weights)
    return {t: env[t] for t in graph.outputs}


def max_relative_error(actual: dict, expected: dict):
    """Worst error over all outputs, scaled by each output's largest magnitude."""
    worst = (0.0, None)
    for t, ref in expected.items():
        diff = np.abs(actual[t] - ref)
        scale = max(float(np.abs(ref).max()), np.finfo(float).tiny)
        idx = np.unravel_index(int(diff.argmax()), diff.shape)
        err = float(diff[idx]) / scale
        if err > worst[0] or worst[1] is None:
            worst = (err, (t, tuple(int(i) for i in idx)))
    return worst


def check_equivalence(graph, plan, seed=0, rtol=1e-5) -> float:
    rng = np.random.default_rng(seed)
    inputs = random_inputs(graph, rng)
    weights = random_weights(graph, rng)
    ref = execute_reference(graph, inputs, None, weights)
    got = execute_reference(graph, inputs, plan, weights)
    err, where = max_relative_error(got, ref)
    if err > rtol:
        raise EquivalenceFailure(
            f"fused output deviates by {err:.3e} (> {rtol:g}) at {where}", where, err
        )
    return err
