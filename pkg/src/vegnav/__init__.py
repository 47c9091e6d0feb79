"""Online self-supervised traversability estimation in vegetated terrain.

Modules:
    voxel_map: sparse NDT-style voxel map and per-voxel features.
    collision_map: collision-state belief per voxel and label extraction.
    experience_graph: O-Graph of labelled cylindrical submaps.
    te_model: MLP traversability classifier and its training.
    adaptation: fixed-interval online adaptation cycles and strategies.
    costmap: 3D traversability to 2D planner costmap.
    sim_world: synthetic forest, lidar and robot simulator.
    metrics, harness, cli: evaluation and the command-line surface.
"""

from .adaptation import CycleConfig, OnlineAdapter, Strategy, evaluate, run_cycle
from .collision_map import CollisionEvent, CollisionMap
from .costmap import Costmap2D, generate_costmap
from .experience_graph import MapBatch, OGraph, build_map_batch
from .metrics import Confusion, f1, mcc
from .te_model import TEModel, TrainConfig, forward, init_model, train
from .voxel_map import VoxelMap, VoxelTable

__version__ = "0.1.0"

__all__ = [
    "CollisionEvent", "CollisionMap", "Confusion", "Costmap2D", "CycleConfig", "MapBatch",
    "OGraph", "OnlineAdapter", "Strategy", "TEModel", "TrainConfig", "VoxelMap", "VoxelTable",
    "build_map_batch", "evaluate", "f1", "forward", "generate_costmap", "init_model", "mcc",
    "run_cycle", "train",
]
