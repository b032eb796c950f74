"""Hierarchical lane-change control on a multi-lane loop road.

A lane-selection gate picks a target lane for each ego vehicle; one small
per-lane expert then drives toward that lane. Both levels are trained with
PPO on a numpy MLP engine and evaluated by collision counts.
"""

from .geometry import MapGraph, build_loop_map, load_map, locate, reference_path_for
from .observation import HL_LENGTH, LL_LENGTH, observe_high, observe_low, schema, schema_hash
from .policy import ExpertPool, HighLevelPolicy, LowLevelExpert, hierarchical_step
from .sim import ControlAction, SimConfig, VehicleState, WorldState, spawn, step_world

__version__ = "0.1.0"

__all__ = [
    "MapGraph",
    "build_loop_map",
    "load_map",
    "locate",
    "reference_path_for",
    "HL_LENGTH",
    "LL_LENGTH",
    "observe_high",
    "observe_low",
    "schema",
    "schema_hash",
    "ExpertPool",
    "HighLevelPolicy",
    "LowLevelExpert",
    "hierarchical_step",
    "ControlAction",
    "SimConfig",
    "VehicleState",
    "WorldState",
    "spawn",
    "step_world",
]
