import itertools

import numpy as np
import pytest

from graphs import chain_graph, contiguous_partitions, random_graph
from wmpipe.errors import EquivalenceFailure, GraphError, PlanError
from wmpipe.memcost import (
    FusionGroup, FusionPlan, GraphBuilder, OpGraph, adaln_block, baseline_cost, check_equivalence,
    execute_reference, fused_cost, group_report, plan_fusion, plan_horizontal_fusion,
    plan_vertical_fusion, random_inputs, random_weights, tile_extents, vae_block, working_set_bytes,
)
from wmpipe.memcost import executor as exe
from wmpipe.memcost.cost import GroupKind
from wmpipe.memcost.planner import MIN_TILE

KINDS = ("upsample", "conv", "gn", "silu")


def tensor_bytes(dims, elem=2):
    return int(np.prod(dims)) * elem


def test_vae_block_eight_to_two():
    g = vae_block()
    plan = plan_fusion(g, 2 * 1024 * 1024)
    assert [grp.nodes for grp in plan.groups] == [("upsample", "conv", "group_norm", "silu")]
    base, fused = baseline_cost(g), fused_cost(g, plan)
    assert (base.activation_transactions, fused.activation_transactions) == (8, 2)
    assert 1 - fused.activation_transactions / base.activation_transactions == 0.75


def test_vae_block_bytes_by_hand():
    g = vae_block(channels=8, height=32, width=32)
    small, big = tensor_bytes((1, 8, 32, 32)), tensor_bytes((1, 8, 64, 64))
    base = baseline_cost(g)
    # upsample: small in + big out; conv, gn, silu: big in + big out
    assert base.activation_bytes == small + big + 3 * 2 * big
    fused = fused_cost(g, plan_fusion(g, 1 << 30))
    assert fused.activation_bytes == small + big
    assert fused.stats_bytes == big  # group-norm statistics pass over the conv output
    assert fused.weight_bytes == base.weight_bytes


@pytest.mark.parametrize("length", [1, 2, 3, 4])
def test_fused_never_exceeds_baseline_exhaustive(length):
    for kinds in itertools.product(KINDS, repeat=length):
        g = chain_graph(kinds)
        ids = [n.id for n in g.nodes]
        base = baseline_cost(g)
        for parts in contiguous_partitions(ids):
            fused = fused_cost(g, FusionPlan.from_partition(g, parts))
            assert fused.total_bytes <= base.total_bytes
            assert fused.total_transactions <= base.total_transactions
            assert fused.activation_transactions == len(parts) * 2


def test_group_report_rows():
    g = vae_block()
    rows = group_report(g, plan_fusion(g, 1 << 21))
    assert rows[0]["transactions_before"] == 8 and rows[0]["transactions_after"] == 2
    assert rows[0]["nodes"] == "upsample+conv+group_norm+silu"


def test_working_set_fits_and_tiles_shrink():
    g = vae_block(channels=16, height=32, width=32)
    big = plan_vertical_fusion(g, 1 << 24).groups[0]
    small = plan_vertical_fusion(g, 64 * 1024).groups[0]
    assert big.tile == 64 and small.tile < big.tile
    assert small.working_set_bytes <= 64 * 1024
    assert working_set_bytes(g, small.nodes, small.tile) == small.working_set_bytes
    assert small.halo == 1


def test_tile_extents_include_halo():
    g = chain_graph(["upsample", "conv", "conv"], h=32, w=32)
    ext = tile_extents(g, [n.id for n in g.nodes], 8)
    assert ext[g.nodes[-1].output] == (8, 8)
    assert ext[g.nodes[1].output] == (10, 10)
    assert ext[g.nodes[0].output] == (12, 12)
    assert ext["x"] == (7, 7)


def test_infeasible_fusion_is_reported():
    g = vae_block(channels=64, height=32, width=32)
    plan = plan_vertical_fusion(g, 1024)
    assert all(len(grp.nodes) == 1 for grp in plan.groups)
    assert any(n.startswith("infeasible-fusion") for n in plan.notes)
    assert fused_cost(g, plan).total_bytes == baseline_cost(g).total_bytes


def test_planner_respects_branches():
    b = GraphBuilder()
    x = b.input("x", (1, 4, 8, 8))
    y = b.conv3x3(x, 4, name="c1")
    z = b.silu(y, name="s1")
    b.add(y, z, name="sum")
    g = b.build()
    plan = plan_vertical_fusion(g, 1 << 20)
    groups = [grp.nodes for grp in plan.groups]
    assert ("c1",) in groups  # c1's output feeds two consumers, so it stays materialised
    assert ("s1", "sum") in groups


def test_horizontal_fusion_intensity():
    g = adaln_block(tokens=4096, hidden=1536)
    h = plan_horizontal_fusion(g, ["shift", "scale", "gate"])
    assert h.fused_weight.dims == (1536, 4608)
    assert (h.launches_before, h.launches_after) == (3, 1)
    x = tensor_bytes((1, 4096, 1536))
    w = tensor_bytes((1536, 1536))
    flops = 3 * 2 * 4096 * 1536 * 1536
    assert h.flops == flops
    assert h.ai_before == pytest.approx(flops / (3 * (x + w + x)))
    assert h.ai_after == pytest.approx(flops / (x + 3 * w + 3 * x))
    assert h.ai_after > h.ai_before


def test_horizontal_fusion_rejects_mismatch():
    b = GraphBuilder()
    x = b.input("x", (1, 4, 8))
    y = b.input("y", (1, 4, 8))
    b.matmul(x, 8, name="a")
    b.matmul(y, 8, name="b")
    g = b.build()
    with pytest.raises(PlanError):
        plan_horizontal_fusion(g, ["a", "b"])


def test_plan_fusion_merges_siblings():
    g = adaln_block(tokens=64, hidden=32)
    plan = plan_fusion(g, 1 << 20)
    assert [grp.kind for grp in plan.groups] == [GroupKind.HORIZONTAL]
    assert fused_cost(g, plan).activation_transactions == 4  # one read, three writes


def test_validate_plan_errors():
    g = vae_block()
    with pytest.raises(PlanError):
        fused_cost(g, FusionPlan([FusionGroup(("upsample", "conv"))]))
    with pytest.raises(PlanError):
        fused_cost(g, FusionPlan([FusionGroup(("upsample", "group_norm"), "vertical"),
                                  FusionGroup(("conv",)), FusionGroup(("silu",))]))
    with pytest.raises(PlanError):
        FusionPlan.from_dict({"groups": [{"kind": "single"}]})


def test_graph_validation():
    b = GraphBuilder()
    x = b.input("x", (1, 6, 8, 8))
    with pytest.raises(GraphError):
        b.group_norm(x, 4)
    g = vae_block()
    data = g.to_dict()
    data["tensors"]["silu.out"]["dims"] = [1, 8, 8, 8]
    with pytest.raises(GraphError):
        OpGraph.from_dict(data)
    with pytest.raises(GraphError):
        OpGraph.from_dict({"nodes": []})


def test_graph_round_trip(tmp_path):
    g = vae_block(groups=2)
    p = tmp_path / "g.json"
    p.write_text(g.to_json())
    again = OpGraph.load(p)
    assert again.to_json() == g.to_json()


def test_tiled_executor_vae_block_multi_tile():
    g = vae_block(channels=4, height=20, width=28)
    plan = plan_fusion(g, 24 * 1024)
    assert plan.groups[0].tile < 40
    assert check_equivalence(g, plan, seed=1) <= 1e-5


def test_tiled_loads_stay_within_planned_extents():
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = random_graph(rng)
        plan = plan_fusion(g, int(rng.choice([8192, 32768])))
        inputs, weights = random_inputs(g, rng), random_weights(g, rng)
        loads = {}
        execute_reference(g, inputs, plan, weights, trace_loads=loads)
        for grp in plan.groups:
            if grp.nodes in loads:
                planned = tile_extents(g, grp.nodes, grp.tile)
                for t, (rows, cols) in loads[grp.nodes].items():
                    assert rows <= planned[t][0] and cols <= planned[t][1]


def test_equivalence_failure_detected(monkeypatch):
    g = vae_block(channels=4, height=16, width=16)
    plan = plan_fusion(g, 16 * 1024)
    real = exe._TiledGroup.global_stats

    def skewed(self):
        real(self)
        self.stats = {k: (m, v * 1.01) for k, (m, v) in self.stats.items()}

    monkeypatch.setattr(exe._TiledGroup, "global_stats", skewed)
    with pytest.raises(EquivalenceFailure) as err:
        check_equivalence(g, plan)
    assert err.value.exit_code == 4


def test_desk_scale_limit():
    g = vae_block(height=100, width=100)
    rng = np.random.default_rng(0)
    with pytest.raises(GraphError):
        execute_reference(g, random_inputs(g, rng))


@pytest.mark.parametrize("seed", range(8))
def test_random_graphs_equivalent(seed):
    rng = np.random.default_rng(100 + seed)
    g = random_graph(rng)
    plan = plan_fusion(g, int(rng.choice([4096, 16384, 65536])))
    assert check_equivalence(g, plan, seed=seed) <= 1e-5


def test_min_tile_constant():
    assert MIN_TILE == 8
