"""
From a learned model to a 2D costmap
====================================

Trains a model online on a short drive, predicts traversability for every
mapped voxel, projects the prediction onto the ground surface and fills
small unobserved gaps. The result is printed as a character map.
"""

import numpy as np

from vegnav.adaptation import CycleConfig, OnlineAdapter, Strategy
from vegnav.costmap import EMPTY, VIRTUAL, generate_costmap, nearest_pose_reference
from vegnav.sim_world import WorldConfig, generate_world, plan_script, run_episode
from vegnav.te_model import predict_map
from vegnav.voxel_map import VoxelMap

world = generate_world(WorldConfig(extent=12.0, n_trunks=5, n_veg=5), seed=2)
episode = run_episode(world, plan_script(world, seed=2, duration=80.0), seed=0)

adapter = OnlineAdapter(Strategy.from_name("bm0ca1"), CycleConfig(delta_t=20.0, n_adapt=20))
adapter.run(episode)

# %%
# Voxel map of the whole drive, then one probability per voxel
vm = VoxelMap()
for t, origin, block in episode.scans:
    vm.integrate_scan(origin, block, t)
te = predict_map(adapter.model, vm.to_table(), region=(0.0, 0.0, world.extent, world.extent))
print(f"{len(te)} voxels scored, mean P(TR) {te.p.mean():.3f}")

# %%
# Ground height comes from the nearest robot pose
cm = generate_costmap(te, nearest_pose_reference(episode.poses))
s = cm.surface
print(f"{cm.cost.shape[0]}x{cm.cost.shape[1]} cells: "
      f"{int((s.cls == VIRTUAL).sum())} virtual, {int(cm.fatal.sum())} fatal, "
      f"{int((s.cls == EMPTY).sum())} never seen")

# %%
# One character per 0.5 m block: '#' if the block holds a fatal cell,
# otherwise its highest cost rounded down
step = 5
nx, ny = cm.cost.shape
for v in range(ny - step, -1, -step):
    row = ""
    for u in range(0, nx, step):
        block = cm.cost[u:u + step, v:v + step]
        row += "#" if np.isinf(block).any() else str(min(int(block.max()), 9))
    print(row)
