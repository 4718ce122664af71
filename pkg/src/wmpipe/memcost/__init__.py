"""Operator-graph memory traffic, fusion planning and a tiled reference executor."""

from .cost import (
    Cost, FusionGroup, FusionPlan, GroupKind, baseline_cost, fused_cost, group_report, tile_count,
    validate_plan,
)
from .executor import check_equivalence, execute_reference, random_inputs, random_weights
from .graph import GraphBuilder, OpGraph, OpKind, OpNode, TensorSpec, adaln_block, vae_block
from .planner import (
    HorizontalFusion, plan_fusion, plan_horizontal_fusion, plan_vertical_fusion, tile_extents,
    working_set_bytes,
)
