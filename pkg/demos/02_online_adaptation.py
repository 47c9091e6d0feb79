"""
Learning traversability online
==============================

Replays one simulated drive through the training loop twice: once
retraining from scratch every cycle, once continuing from the previous
cycle's model. Each published model is scored against ground truth on a
quadrant the robot never entered.
"""

import numpy as np

from vegnav.adaptation import CycleConfig, Evaluator, OnlineAdapter, Strategy, replay_intervals
from vegnav.harness import quadrant
from vegnav.sim_world import WorldConfig, drive_map, evaluation_labels, generate_world, plan_script, run_episode

world = generate_world(WorldConfig(extent=16.0, n_trunks=8, n_veg=10), seed=5)
held_out = quadrant(world)
script = plan_script(world, seed=5, duration=120.0, exclude=held_out)
episode = run_episode(world, script, seed=0)
print(f"{len(world.trunks)} trunks, {len(world.veg)} bushes, "
      f"{len(episode.events)} collision events over {episode.duration:.0f} s")

# %%
# Test map: a short drive inside the held-out quadrant, labelled from the
# world geometry
test_map = drive_map(world, held_out, seed=99, duration=60.0).to_table()
rows, labels = evaluation_labels(world, test_map, held_out)
evaluator = Evaluator(test_map, rows, labels)
print(f"{rows.size} test voxels, {int((labels == 0).sum())} of them non-traversable")

# %%
# Both strategies consume exactly the same cycle intervals
intervals = list(replay_intervals(episode, delta_t=20.0))
cfg = CycleConfig(delta_t=20.0, n_adapt=20, seed=0)
for name in ("bm0ca0", "bm0ca1"):
    reports = OnlineAdapter(Strategy.from_name(name), cfg, evaluator).run(intervals=intervals)
    curve = np.array([r["mcc"] for r in reports])
    print(f"{name}: MCC per cycle {np.round(curve, 3).tolist()}")
