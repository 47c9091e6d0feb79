"""Strategy comparison: the four adaptation strategies over identical logs."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import (
    CycleConfig,
    Evaluator,
    OnlineAdapter,
    Strategy,
    cap_samples,
    replay_intervals,
    run_cycle,
    initial_state,
)
from .sim_world import (
    World,
    WorldConfig,
    drive_map,
    evaluation_labels,
    generate_world,
    plan_script,
    run_episode,
)
from .te_model import OFFLINE_EPOCHS, TrainConfig, init_model, samples_to_arrays, train

log = logging.getLogger(__name__)


def quadrant(world: World, ix=1, iy=1):
    """xy rectangle of a world quadrant; (1, 1) is the one far from the origin."""
    h = world.extent / 2.0
    return (ix * h, iy * h, (ix + 1) * h, (iy + 1) * h)


def experience_graph_of(world: World, seed=0, duration=480.0, delta_t=40.0, exclude=None):
    """Drive ``world`` and return the final adaptation state with training off."""
    script = plan_script(world, seed=seed, duration=duration, exclude=exclude)
    episode = run_episode(world, script, seed=seed)
    cfg = CycleConfig(delta_t=delta_t, n_adapt=0, seed=seed)
    state = initial_state(Strategy(False, False), cfg)
    for iv in replay_intervals(episode, delta_t, cfg.resolution, state.graph.r_max,
                               state.graph.z_bounds):
        run_cycle(state, iv.t_k, iv.snapshots, iv.events, iv.poses)
    return state


def train_base_model(world_seed=1000, seed=0, duration=480.0, epochs=OFFLINE_EPOCHS,
                     max_voxels=20000, world_config: WorldConfig | None = None):
    """Offline base model trained on self-labelled experience from another world.

    Returns:
        (model, epoch losses)
    """
    world = generate_world(world_config or WorldConfig(), seed=world_seed)
    state = experience_graph_of(world, seed=seed, duration=duration)
    samples = state.graph.training_samples(occupied_only=True)
    if not samples:
        raise ValueError("base world produced no labelled voxels")
    X, y = samples_to_arrays(cap_samples(samples, max_voxels, seed))
    model, losses = train(init_model(seed), X, y, TrainConfig(epochs=epochs, seed=seed))
    model.meta.update({"kind": "base", "world_seed": world_seed, "n_train": int(y.size)})
    return model, losses


@dataclass
class HarnessResult:
    strategies: list
    seeds: list
    t: np.ndarray
    # name -> (n_seeds, n_cycles)
    mcc: dict
    f1: dict
    stale: dict
    wall: dict = field(default_factory=dict)

    def mean(self, name):
        return self.mcc[name].mean(axis=0)

    def std(self, name):
        return self.mcc[name].std(axis=0)

    def final(self, name):
        return self.mcc[name][:, -1]

    def to_json(self) -> dict:
        return {
            "strategies": self.strategies,
            "seeds": self.seeds,
            "t": self.t.tolist(),
            "curves": {
                n: {
                    "mcc": self.mcc[n].tolist(),
                    "f1": self.f1[n].tolist(),
                    "stale": self.stale[n].tolist(),
                    "mean": self.mean(n).tolist(),
                    "std": self.std(n).tolist(),
                    "wall_s": self.wall.get(n),
                }
                for n in self.strategies
            },
        }

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "harness.json").write_text(json.dumps(self.to_json(), indent=1))
        lines = ["strategy,cycle,t,mcc_mean,mcc_std"]
        for n in self.strategies:
            for k, (m, s) in enumerate(zip(self.mean(n), self.std(n))):
                lines.append(f"{n},{k + 1},{self.t[k]!r},{m!r},{s!r}")
        (d / "mcc_bands.csv").write_text("\n".join(lines) + "\n")


def strategy_harness(world: World, script, strategies, seeds, test_region, base_model=None,
                     delta_t=40.0, n_adapt=40, max_train_voxels=12000, test_map=None,
                     test_seed=99, progress=None) -> HarnessResult:
    """Per-strategy, per-cycle MCC against ground truth on ``test_region``.

    Every seed drives the same script (the seed changes sensor noise and the
    training randomness); all strategies replay the same log of that seed.

    Args:
        strategies: names like ``"bm1ca1"`` or Strategy objects.
        base_model: required if any strategy uses one.
        test_map: VoxelTable to evaluate on; by default a drive confined to
            ``test_region``.
        progress: optional callback ``(strategy name, seed, report)``.
    """
    strategies = [s if isinstance(s, Strategy) else Strategy.from_name(s) for s in strategies]
    seeds = list(seeds)
    if not strategies or not seeds:
        raise ValueError("need at least one strategy and one seed")
    if test_map is None:
        test_map = drive_map(world, test_region, seed=test_seed).to_table()
    rows, labels = evaluation_labels(world, test_map, test_region)
    evaluator = Evaluator(test_map, rows, labels)

    names = [s.name for s in strategies]
    mcc = {n: [] for n in names}
    f1 = {n: [] for n in names}
    stale = {n: [] for n in names}
    wall = {n: 0.0 for n in names}
    t_axis = None
    for seed in seeds:
        episode = run_episode(world, script, seed=seed)
        intervals = list(replay_intervals(episode, delta_t))
        t_axis = np.array([iv.t_k for iv in intervals])
        for s in strategies:
            cfg = CycleConfig(delta_t=delta_t, n_adapt=n_adapt, base_model=base_model, seed=seed,
                              max_train_voxels=max_train_voxels)
            cb = None if progress is None else (lambda st, r, n=s.name: progress(n, seed, r))
            start = time.perf_counter()
            reports = OnlineAdapter(s, cfg, evaluator, on_cycle=cb).run(intervals=intervals)
            wall[s.name] += time.perf_counter() - start
            mcc[s.name].append([r["mcc"] for r in reports])
            f1[s.name].append([r["f1"] for r in reports])
            stale[s.name].append([r["stale"] for r in reports])
            log.info("%s seed %d final MCC %.3f", s.name, seed, reports[-1]["mcc"] if reports else 0)
    return HarnessResult(
        names, seeds, t_axis if t_axis is not None else np.zeros(0),
        {n: np.array(v, dtype=float).reshape(len(seeds), -1) for n, v in mcc.items()},
        {n: np.array(v, dtype=float).reshape(len(seeds), -1) for n, v in f1.items()},
        {n: np.array(v, dtype=bool).reshape(len(seeds), -1) for n, v in stale.items()},
        {n: w / len(seeds) for n, w in wall.items()},
    )
