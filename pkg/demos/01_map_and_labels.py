"""
Mapping a small forest and labelling it by bumping into things
==============================================================

A robot drives through a 12 m world, bumps into two trunks on purpose and
backs off again. The lidar scans go into the voxel map, the drive and bump
events go into the collision map, and the two are combined into labelled
voxels.
"""

import numpy as np

from vegnav.collision_map import CollisionMap, extract_labels
from vegnav.sim_world import Ground, Leg, OperatorScript, Trunk, VegCluster, World, run_episode
from vegnav.voxel_map import VoxelMap

# two trunks and one bush the robot can push through
world = World(0, 12.0, Ground(),
              [Trunk(6.0, 5.0, 0.25, 4.0), Trunk(5.0, 8.0, 0.3, 4.0)],
              [VegCluster((8.0, 3.0, 0.4), (0.8, 0.8, 0.4), 200.0, 0.8, True)])

legs = [Leg((4.0, 5.0)), Leg((6.0, 5.0), "deliberate_collide"), Leg((4.0, 5.0), "back_off"),
        Leg((3.0, 7.0)), Leg((5.0, 8.0), "deliberate_collide"), Leg((3.0, 7.0), "back_off"),
        Leg((8.0, 1.5)), Leg((8.0, 4.5))]
episode = run_episode(world, OperatorScript((2.0, 5.0, 0.0), legs), seed=0)
print(f"{len(episode.scans)} scans, {len(episode.events)} collision events, "
      f"{episode.duration:.1f} s")

# %%
# Fold every scan into the voxel map
vm = VoxelMap()
for t, origin, block in episode.scans:
    vm.integrate_scan(origin, block, t)
table = vm.to_table()
print(f"{len(vm)} voxels, {int((table.n > 0).sum())} with lidar endpoints")

# %%
# Driving labels the footprint as traversable, bumping labels the bumper box
# as non-traversable. Voxels between the two thresholds stay unlabelled.
cmap = CollisionMap().apply_events(episode.events)
labels = extract_labels(cmap, vm)
n_ntr = sum(lv.label == "NTR" for lv in labels)
print(f"{len(labels)} labelled voxels: {len(labels) - n_ntr} TR, {n_ntr} NTR")

# repeated drives push P(NTR) towards zero, repeated bumps towards one
keys, p = cmap.labelled_keys()
print("P(NTR) range over labelled voxels:", np.round([p.min(), p.max()], 4))
