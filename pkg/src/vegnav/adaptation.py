"""Online adaptation: fixed-interval training cycles over the O-Graph.

Every ``delta_t`` seconds of (simulated) time the collision events gathered
since the last cycle are fused into the collision map, the interval's local
snapshots are fused into a map batch, the graph is updated and one model is
trained for a fixed number of epochs. Four strategies differ in the model a
cycle starts from: BM selects a pre-trained base model instead of a random
one, CA continues from the previous cycle's model instead of restarting.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision_map import CollisionMap
from .experience_graph import (
    BatchBuilder,
    MapBatch,
    R_MAX,
    Z_MAX,
    Z_MIN,
    Z_PAD,
    OGraph,
    TrainingSample,
    build_map_batch,
    fuse_newest,
)
from .metrics import Confusion, f1, mcc
from .te_model import (
    ONLINE_EPOCHS,
    TEModel,
    TrainConfig,
    build_stencils,
    forward,
    init_model,
    samples_to_arrays,
    train,
)
from .voxel_map import VoxelMap, VoxelTable

log = logging.getLogger(__name__)

STRATEGIES = ("bm0ca0", "bm0ca1", "bm1ca0", "bm1ca1")


@dataclass(frozen=True)
class Strategy:
    use_base_model: bool
    continuous_adaptation: bool

    @property
    def name(self) -> str:
        return f"bm{int(self.use_base_model)}ca{int(self.continuous_adaptation)}"

    @classmethod
    def from_name(cls, name: str) -> "Strategy":
        name = name.lower()
        if name not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        return cls(name[2] == "1", name[5] == "1")

    @classmethod
    def all(cls):
        return [cls.from_name(n) for n in STRATEGIES]


@dataclass
class CycleConfig:
    delta_t: float = 40.0
    n_adapt: int = ONLINE_EPOCHS
    base_model: TEModel | None = None
    seed: int = 0
    resolution: float = 0.1
    tr_threshold: float = 0.4
    ntr_threshold: float = 0.6
    # cap on labelled voxel instances per cycle, None for no cap
    max_train_voxels: int | None = 12000
    # train on voxels holding at least one hit only
    occupied_only: bool = True
    # simulated seconds per training epoch; 0 means training never overruns
    epoch_cost: float = 0.0
    wall_clock: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")


def overrun_policy(pending: list[MapBatch]) -> MapBatch:
    """Merge batches whose training cycle was missed, newest data winning."""
    if not pending:
        raise ValueError("no pending batches")
    if len(pending) == 1:
        return pending[0]
    tables = [b.table for b in pending if len(b.table)]
    table = fuse_newest(tables) if tables else pending[-1].table
    poses = np.vstack([b.poses for b in pending])
    poses = poses[np.argsort(poses[:, 0], kind="stable")]
    return MapBatch(table, poses, (pending[0].interval[0], pending[-1].interval[1]))


def evaluate(model: TEModel, test_map: VoxelTable, rows, labels, threshold=0.5, X=None) -> dict:
    """MCC / F1 of ``model`` on labelled voxels of a test map.

    Args:
        rows: voxel rows of ``test_map`` to score.
        labels: truth per row, 1 TR / 0 NTR.
        X: precomputed stencils for ``rows`` (optional).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no test labels")
    if X is None:
        X = build_stencils(test_map, rows)
    p = forward(model, X)
    c = Confusion.from_predictions(p >= threshold, labels == 1)
    return {"mcc": mcc(c), "f1": f1(c), "confusion": c.as_dict()}


class Evaluator:
    """Caches the test stencils so every cycle's model is scored cheaply."""

    def __init__(self, test_map: VoxelTable, rows, labels, threshold=0.5):
        self.test_map = test_map
        self.rows = np.asarray(rows)
        self.labels = np.asarray(labels)
        self.threshold = threshold
        self.X = build_stencils(test_map, self.rows)

    def __call__(self, model: TEModel) -> dict:
        return evaluate(model, self.test_map, self.rows, self.labels, self.threshold, X=self.X)


@dataclass
class AdaptationState:
    strategy: Strategy
    config: CycleConfig
    cmap: CollisionMap
    graph: OGraph
    model: TEModel
    start_model: TEModel
    cycle: int = 0
    t_prev: float = 0.0
    pending: list = field(default_factory=list)
    busy_until: float = -np.inf
    trained_once: bool = False
    reports: list = field(default_factory=list)


def initial_state(strategy: Strategy, config: CycleConfig) -> AdaptationState:
    if strategy.use_base_model:
        if config.base_model is None:
            raise ValueError("strategies with a base model need config.base_model")
        start = config.base_model.copy()
    else:
        start = init_model(config.seed)
    return AdaptationState(
        strategy=strategy, config=config,
        cmap=CollisionMap(resolution=config.resolution),
        graph=OGraph(resolution=config.resolution),
        model=start.copy(), start_model=start,
    )


def cap_samples(samples, cap, seed):
    """Deterministic subset of at most ``cap`` labelled voxel instances.

    NTR instances are rare, so they are kept up to half the budget.
    """
    total = sum(len(s) for s in samples)
    if cap is None or total <= cap:
        return samples
    y = np.concatenate([s.y for s in samples])
    owner = np.concatenate([np.full(len(s), i) for i, s in enumerate(samples)])
    local = np.concatenate([np.arange(len(s)) for s in samples])
    rng = np.random.default_rng(seed)
    ntr = np.flatnonzero(y == 0)
    tr = np.flatnonzero(y == 1)
    keep_ntr = ntr if ntr.size <= cap // 2 else rng.choice(ntr, cap // 2, replace=False)
    keep_tr = rng.choice(tr, min(tr.size, cap - keep_ntr.size), replace=False)
    keep = np.sort(np.concatenate([keep_ntr, keep_tr]))
    out = []
    for i, s in enumerate(samples):
        sel = local[keep[owner[keep] == i]]
        if sel.size:
            out.append(TrainingSample(s.node_id, s.submap, s.rows[sel], s.y[sel]))
    return out


def run_cycle(state: AdaptationState, t_k: float, snapshots, events, poses=(),
              evaluator=None) -> dict:
    """One training cycle over the interval (t_prev, t_k].

    Args:
        snapshots: ``(t, VoxelTable)`` local maps of the interval, oldest first.
        events: collision events of the interval.
        poses: stamped poses of the interval.
        evaluator: optional callable model -> metrics dict.

    Returns:
        the cycle report.
    """
    cfg = state.config
    state.cycle += 1
    state.cmap.apply_events(events)
    batch = build_map_batch(list(snapshots), state.cmap, poses, (state.t_prev, t_k),
                            resolution=cfg.resolution)
    state.pending.append(batch)
    state.t_prev = t_k
    report = {"cycle": state.cycle, "t_k": t_k, "n_new_nodes": 0, "n_samples": 0,
              "n_voxels": 0, "epoch_losses": [], "trained": False, "overrun": False}

    if state.busy_until > t_k:
        report["overrun"] = True
        log.info("cycle %d: training still running, batch deferred", state.cycle)
    else:
        merged = overrun_policy(state.pending)
        state.pending = []
        if len(merged.table):
            merged.table.p_ntr = state.cmap.p_ntr(merged.table.keys)
        report["n_new_nodes"] = len(state.graph.update(merged))

        samples = state.graph.training_samples(cfg.tr_threshold, cfg.ntr_threshold,
                                               cfg.occupied_only)
        report["n_samples"] = len(samples)
        if not samples:
            log.info("cycle %d: no labelled samples yet, model kept", state.cycle)
        else:
            if state.strategy.continuous_adaptation and state.trained_once:
                start = state.model
            else:
                start = state.start_model
            chosen = cap_samples(samples, cfg.max_train_voxels, cfg.seed * 7919 + state.cycle)
            X, y = samples_to_arrays(chosen)
            report["n_voxels"] = int(y.size)
            tc = TrainConfig(**{**cfg.train.__dict__, "epochs": cfg.n_adapt,
                                "seed": cfg.seed * 1000 + state.cycle})
            wall = time.perf_counter()
            model, losses = train(start, X, y, tc)
            wall = time.perf_counter() - wall
            state.model = model  # publication is a single reference swap
            state.trained_once = True
            report["epoch_losses"] = losses
            report["trained"] = True
            cost = wall if cfg.wall_clock else cfg.n_adapt * cfg.epoch_cost
            state.busy_until = t_k + cost

    # an untrained cycle publishes nothing new: its score is the previous one
    report["stale"] = not report["trained"]
    prev = state.reports[-1] if state.reports else None
    if evaluator is None:
        report["mcc"] = report["f1"] = None
    elif report["stale"] and prev is not None and prev.get("mcc") is not None:
        report["mcc"], report["f1"] = prev["mcc"], prev["f1"]
        report["confusion"] = prev["confusion"]
    else:
        m = evaluator(state.model)
        report["mcc"], report["f1"] = m["mcc"], m["f1"]
        report["confusion"] = m["confusion"]
    state.reports.append(report)
    return report


@dataclass
class Interval:
    """Everything one cycle consumes: the data of (t_k - delta_t, t_k]."""

    t_k: float
    snapshots: list
    events: list
    poses: np.ndarray


def replay_intervals(episode, delta_t=40.0, resolution=0.1, r_max=R_MAX,
                     z_bounds=(Z_MIN - Z_PAD, Z_MAX + Z_PAD), snapshot_every=1, until=None,
                     voxel_map=None):
    """Rebuild the live map from an episode and cut it into cycle intervals.

    Scans are integrated in order; after each one a local snapshot around the
    current pose is folded into the running batch. Only completed intervals
    are yielded. The data does not depend on the adaptation strategy, so the
    result can be shared between strategies.
    """
    vm = voxel_map if voxel_map is not None else VoxelMap(resolution)
    poses = episode.poses
    scans = episode.scans
    events = sorted(episode.events, key=lambda e: e.t)
    end = episode.duration if until is None else until
    n_cycles = int(np.floor(end / delta_t + 1e-9))
    si = pi = ei = 0
    for k in range(1, n_cycles + 1):
        t_k = k * delta_t
        builder = BatchBuilder(resolution)
        while pi < len(poses) and poses[pi, 0] <= t_k + 1e-9:
            builder.add_pose(poses[pi])
            pi += 1
        while si < len(scans) and scans[si][0] <= t_k + 1e-9:
            t, origin, block = scans[si]
            vm.integrate_scan(origin, block, t)
            if si % snapshot_every == 0:
                snap = vm.local_snapshot(_pose_at(poses, t), r_max, *z_bounds)
                builder.add_snapshot(t, snap)
            si += 1
        ev = []
        while ei < len(events) and events[ei].t <= t_k + 1e-9:
            ev.append(events[ei])
            ei += 1
        snaps, pose_block = builder.parts()
        yield Interval(t_k, snaps, ev, pose_block)


class OnlineAdapter:
    """Replays an episode log through the mapping and adaptation pipeline.

    Args:
        snapshot_every: take a local snapshot every n-th scan.
        on_cycle: optional callback ``(state, report)`` after every cycle.
    """

    def __init__(self, strategy: Strategy, config: CycleConfig, evaluator=None,
                 snapshot_every=1, on_cycle=None):
        self.state = initial_state(strategy, config)
        self.evaluator = evaluator
        self.snapshot_every = snapshot_every
        self.on_cycle = on_cycle
        self.voxel_map = VoxelMap(config.resolution)

    def run(self, episode=None, until=None, intervals=None) -> list[dict]:
        """Run all completed cycles of ``episode`` or of precomputed intervals."""
        cfg = self.state.config
        g = self.state.graph
        if intervals is None:
            intervals = replay_intervals(episode, cfg.delta_t, cfg.resolution, g.r_max, g.z_bounds,
                                         self.snapshot_every, until, self.voxel_map)
        for iv in intervals:
            report = run_cycle(self.state, iv.t_k, iv.snapshots, iv.events, iv.poses,
                               self.evaluator)
            if self.on_cycle is not None:
                self.on_cycle(self.state, report)
        return self.state.reports

    @property
    def model(self) -> TEModel:
        return self.state.model


def _pose_at(poses, t):
    i = np.searchsorted(poses[:, 0], t + 1e-9) - 1
    return poses[max(i, 0), 1:4]


def write_reports(reports, path):
    keys = ("cycle", "t_k", "n_new_nodes", "n_samples", "epoch_losses", "mcc", "f1")
    with Path(path).open("w") as fh:
        for r in reports:
            rec = {k: r.get(k) for k in keys}
            rec.update({k: v for k, v in r.items() if k not in keys})
            fh.write(json.dumps(rec) + "\n")
