"""Collision mapping: the robot used as a traversability sensor.

Each robot state with a collision observation paints the voxels of a bounding
box with a fixed inverse-model probability. The per-voxel belief that a voxel
is non-traversable (NTR) is kept in log-odds and updated additively.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .voxel_map import (
    LOG_ODDS_CLAMP,
    VoxelMap,
    logistic,
    pack_keys,
    unpack_keys,
)

TR, NTR = "TR", "NTR"

P_NTR_GIVEN_COLLISION = 0.75
P_NTR_GIVEN_TRAVERSAL = 0.3
ROBOT_DIMS = (0.6, 0.4, 0.4)
# frontal collision volume relative to the chassis front plane
NTR_BEHIND_FRONT = 0.1
NTR_BEYOND_FRONT = 0.2


def yaw_to_quat(yaw: float) -> tuple[float, float, float, float]:
    return (math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0))


def quat_to_yaw(q) -> float:
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


@dataclass(frozen=True)
class CollisionEvent:
    t: float
    pos: tuple[float, float, float]
    quat: tuple[float, float, float, float]
    state: str

    def __post_init__(self):
        if self.state not in (TR, NTR):
            raise ValueError(f"state must be TR or NTR, got {self.state!r}")
        if not all(math.isfinite(v) for v in self.pos):
            raise ValueError("event position must be finite")
        norm = math.sqrt(sum(v * v for v in self.quat))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("event orientation must be a unit quaternion")

    @property
    def yaw(self) -> float:
        return quat_to_yaw(self.quat)

    def to_json(self) -> dict:
        return {"t": self.t, "pos": list(self.pos), "quat": list(self.quat), "state": self.state}

    @classmethod
    def from_json(cls, rec: dict) -> "CollisionEvent":
        return cls(float(rec["t"]), tuple(rec["pos"]), tuple(rec["quat"]), rec["state"])


def write_events_jsonl(events, path):
    with Path(path).open("w") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_json()) + "\n")


def read_events_jsonl(path) -> list[CollisionEvent]:
    with Path(path).open() as fh:
        return [CollisionEvent.from_json(json.loads(s)) for s in fh if s.strip()]


def event_box(state: str, robot_dims=ROBOT_DIMS):
    """Local-frame box (x0, x1, y0, y1, z0, z1) painted by an event."""
    length, width, height = robot_dims
    if min(robot_dims) <= 0:
        raise ValueError("robot dimensions must be positive")
    front = length / 2.0
    if state == NTR:
        x0, x1 = front - NTR_BEHIND_FRONT, front + NTR_BEYOND_FRONT
    else:
        x0, x1 = -front, front
    return x0, x1, -width / 2.0, width / 2.0, 0.0, height


def box_voxels(pos, yaw, box, resolution) -> np.ndarray:
    """Voxels whose center lies in an oriented box, as an (N, 3) key array.

    The box is half-open ``[lo, hi)`` along each local axis.
    """
    x0, x1, y0, y1, z0, z1 = box
    c, s = math.cos(yaw), math.sin(yaw)
    px, py, pz = pos
    xs = (px + c * x0 - s * y0, px + c * x0 - s * y1, px + c * x1 - s * y0, px + c * x1 - s * y1)
    ys = (py + s * x0 + c * y0, py + s * x0 + c * y1, py + s * x1 + c * y0, py + s * x1 + c * y1)
    eps = 1e-9
    ix = np.arange(math.floor(min(xs) / resolution) - 1, math.floor(max(xs) / resolution) + 2)
    iy = np.arange(math.floor(min(ys) / resolution) - 1, math.floor(max(ys) / resolution) + 2)
    iz = np.arange(math.floor((pz + z0) / resolution) - 1, math.floor((pz + z1) / resolution) + 2)
    dx = ((ix + 0.5) * resolution - px)[:, None]
    dy = ((iy + 0.5) * resolution - py)[None, :]
    lz = (iz + 0.5) * resolution - pz
    iz = iz[(lz >= z0 - eps) & (lz < z1 - eps)]
    lx = c * dx + s * dy
    ly = c * dy - s * dx
    u, v = np.nonzero((lx >= x0 - eps) & (lx < x1 - eps) & (ly >= y0 - eps) & (ly < y1 - eps))
    n = iz.size
    return np.column_stack([np.repeat(ix[u], n), np.repeat(iy[v], n), np.tile(iz, u.size)])


def event_bbox_voxels(event: CollisionEvent, robot_dims=ROBOT_DIMS, resolution=0.1) -> np.ndarray:
    """Voxels painted by one event: the footprint volume for TR, the frontal
    volume for NTR, both oriented by the pose yaw."""
    return box_voxels(event.pos, event.yaw, event_box(event.state, robot_dims), resolution)


@dataclass
class LabeledVoxel:
    key: tuple[int, int, int]
    label: str
    features: np.ndarray


@dataclass
class CollisionMap:
    """Sparse map of NTR log-odds. Missing keys stand for the 0.5 prior."""

    resolution: float = 0.1
    robot_dims: tuple = ROBOT_DIMS
    p_collision: float = P_NTR_GIVEN_COLLISION
    p_traversal: float = P_NTR_GIVEN_TRAVERSAL
    log_odds: dict = field(default_factory=dict)

    def copy(self) -> "CollisionMap":
        return CollisionMap(self.resolution, self.robot_dims, self.p_collision,
                            self.p_traversal, dict(self.log_odds))

    def __len__(self):
        return len(self.log_odds)

    def apply_event(self, event: CollisionEvent) -> "CollisionMap":
        keys = pack_keys(event_bbox_voxels(event, self.robot_dims, self.resolution)).tolist()
        p = self.p_collision if event.state == NTR else self.p_traversal
        dl = math.log(p / (1.0 - p))
        lo = self.log_odds
        vals = np.fromiter((lo.get(k, 0.0) for k in keys), dtype=float, count=len(keys)) + dl
        np.clip(vals, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP, out=vals)
        lo.update(zip(keys, vals.tolist()))
        return self

    def apply_events(self, events) -> "CollisionMap":
        for ev in events:
            self.apply_event(ev)
        return self

    def p_ntr(self, keys) -> np.ndarray:
        """Posterior P(NTR) of each key, 0.5 where no event touched it."""
        lo = self.log_odds
        vals = np.fromiter((lo.get(k, 0.0) for k in pack_keys(keys).tolist()), dtype=float)
        return logistic(vals)

    def labelled_keys(self, tr_threshold=0.4, ntr_threshold=0.6):
        """Keys and p_NTR of every voxel outside the dead zone."""
        if not self.log_odds:
            return np.zeros((0, 3), np.int64), np.zeros(0)
        packed = np.fromiter(self.log_odds.keys(), dtype=np.int64)
        p = logistic(np.fromiter(self.log_odds.values(), dtype=float))
        keep = (p >= ntr_threshold) | (p <= tr_threshold)
        order = np.argsort(packed[keep], kind="stable")
        return unpack_keys(packed[keep][order]), p[keep][order]


def apply_event(cmap: CollisionMap, event: CollisionEvent) -> CollisionMap:
    return cmap.apply_event(event)


def binarize(p_ntr, tr_threshold=0.4, ntr_threshold=0.6) -> np.ndarray:
    """+1 for TR, 0 for NTR, -1 inside the dead zone."""
    if not tr_threshold < ntr_threshold:
        raise ValueError("tr_threshold must be below ntr_threshold")
    p = np.asarray(p_ntr, dtype=float)
    out = np.full(p.shape, -1, dtype=np.int8)
    out[p <= tr_threshold] = 1
    out[p >= ntr_threshold] = 0
    return out


def extract_labels(cmap: CollisionMap, feature_map, tr_threshold=0.4, ntr_threshold=0.6,
                   i_max=None) -> list[LabeledVoxel]:
    """Labelled voxels that also carry features in ``feature_map``.

    Args:
        feature_map: a VoxelMap or VoxelTable providing the features.
    """
    if not tr_threshold < ntr_threshold:
        raise ValueError("tr_threshold must be below ntr_threshold")
    keys, p = cmap.labelled_keys(tr_threshold, ntr_threshold)
    if isinstance(feature_map, VoxelMap):
        i_max = feature_map.i_max if i_max is None else i_max
        table = feature_map.to_table()
    else:
        table = feature_map
        i_max = 255.0 if i_max is None else i_max
    if len(keys) == 0 or len(table) == 0:
        return []
    packed = table.packed()
    order = np.argsort(packed)
    q = pack_keys(keys)
    pos = np.clip(np.searchsorted(packed[order], q), 0, len(packed) - 1)
    rows = order[pos]
    found = packed[rows] == q
    observed = (table.n[rows] > 0) | (table.nm[rows] > 0)
    keep = np.flatnonzero(found & observed)
    feats = table.take(rows[keep]).features(i_max)
    out = []
    for j, i in enumerate(keep):
        label = NTR if p[i] >= ntr_threshold else TR
        out.append(LabeledVoxel(tuple(int(v) for v in keys[i]), label, feats[j]))
    return out
