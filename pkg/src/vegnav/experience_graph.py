"""O-Graph: sparse keypose graph of labelled local submaps.

Voxel statistics evolve over time, so the training data is kept per keypose
node and refreshed voxel-wise whenever a newer measurement of the same voxel
arrives (steady-state assumption: the newest distribution is the best one).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collision_map import NTR, TR, CollisionMap, LabeledVoxel, binarize
from .voxel_map import FORMAT_VERSION, VoxelTable, cylinder_mask, key_centers

D_NODE = 0.5
R_MAX = 2.0
Z_MIN = -0.5
Z_MAX = 0.8
Z_PAD = 0.2

# pose rows: t, x, y, z, qw, qx, qy, qz
POSE_COLS = 8


def as_poses(poses) -> np.ndarray:
    p = np.asarray(poses, dtype=float)
    if p.size == 0:
        return np.zeros((0, POSE_COLS))
    p = p.reshape(len(p), -1)
    if p.shape[1] == 4:  # t, x, y, z
        p = np.hstack([p, np.tile([1.0, 0.0, 0.0, 0.0], (len(p), 1))])
    if p.shape[1] != POSE_COLS:
        raise ValueError("poses must have 4 or 8 columns")
    return p


def fuse_newest(tables) -> VoxelTable:
    """Fuse tables given oldest first; for repeated voxels the last table wins."""
    tables = [t for t in tables if len(t)]
    if not tables:
        raise ValueError("nothing to fuse")
    cat = VoxelTable.concat(tables)
    seq = np.concatenate([np.full(len(t), i) for i, t in enumerate(tables)])
    packed = cat.packed()
    order = np.lexsort((seq, packed))
    sp = packed[order]
    last = np.ones(sp.size, dtype=bool)
    last[:-1] = sp[1:] != sp[:-1]
    return cat.take(order[last])


@dataclass
class MapBatch:
    """Newest-wins fusion of the snapshots of one interval, with labels."""

    table: VoxelTable
    poses: np.ndarray
    interval: tuple[float, float]

    def __len__(self):
        return len(self.table)


def build_map_batch(snapshots, cmap: CollisionMap, poses, interval=None, resolution=None) -> MapBatch:
    """Stitch the interval's local snapshots and attach collision beliefs.

    Args:
        snapshots: list of ``(t, VoxelTable)`` ordered by time.
        cmap: collision map holding all events up to the end of the interval.
        poses: stamped poses of the interval.
    """
    poses = as_poses(poses)
    if interval is None:
        ts = [t for t, _ in snapshots] + list(poses[:, 0])
        interval = (min(ts), max(ts)) if ts else (0.0, 0.0)
    res = resolution if resolution is not None else (snapshots[0][1].resolution if snapshots else cmap.resolution)
    tabs = [tb for _, tb in snapshots if len(tb)]
    if not tabs:
        return MapBatch(VoxelTable.empty(res, with_labels=True), poses, interval)
    fused = fuse_newest(tabs)
    fused.p_ntr = cmap.p_ntr(fused.keys)
    return MapBatch(fused, poses, interval)


class BatchBuilder:
    """Incremental form of ``build_map_batch``: snapshots are folded in as
    they arrive so only the fused table is buffered."""

    def __init__(self, resolution):
        self.resolution = resolution
        self._table = None
        self._poses = []
        self.t_first = None
        self.t_last = None

    def add_snapshot(self, t, table: VoxelTable):
        self.t_first = t if self.t_first is None else self.t_first
        self.t_last = t
        if len(table):
            self._table = table if self._table is None else fuse_newest([self._table, table])

    def add_pose(self, pose):
        self._poses.append(np.asarray(pose, dtype=float))

    def parts(self):
        """(snapshot list, pose array) equivalent to everything added so far."""
        snaps = [] if self._table is None else [(self.t_last, self._table)]
        poses = as_poses(np.array(self._poses)) if self._poses else np.zeros((0, POSE_COLS))
        return snaps, poses

    def finish(self, cmap: CollisionMap, interval) -> MapBatch:
        poses = as_poses(np.array(self._poses)) if self._poses else np.zeros((0, POSE_COLS))
        if self._table is None:
            table = VoxelTable.empty(self.resolution, with_labels=True)
        else:
            table = self._table.copy()
            table.p_ntr = cmap.p_ntr(table.keys)
        return MapBatch(table, poses, tuple(interval))


@dataclass
class GraphNode:
    id: int
    position: np.ndarray
    submap: VoxelTable
    _packed: np.ndarray = field(default=None, repr=False)

    def packed(self):
        if self._packed is None or self._packed.size != len(self.submap):
            self._packed = self.submap.packed()
        return self._packed


@dataclass
class TrainingSample:
    """One node's submap plus the rows of its labelled voxels (1 = TR, 0 = NTR)."""

    node_id: int
    submap: VoxelTable
    rows: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.rows.size

    @property
    def labelled(self) -> list[LabeledVoxel]:
        feats = self.submap.take(self.rows).features()
        return [
            LabeledVoxel(tuple(int(v) for v in self.submap.keys[r]), TR if y else NTR, f)
            for r, y, f in zip(self.rows, self.y, feats)
        ]


class OGraph:
    def __init__(self, resolution=0.1, d_node=D_NODE, r_max=R_MAX, z_min=Z_MIN, z_max=Z_MAX,
                 z_pad=Z_PAD):
        self.resolution = resolution
        self.d_node = d_node
        self.r_max = r_max
        self.z_min = z_min
        self.z_max = z_max
        self.z_pad = z_pad
        self.nodes: list[GraphNode] = []
        self.edges: list[tuple[int, int]] = []
        self._positions = np.zeros((0, 3))

    @property
    def z_bounds(self):
        return self.z_min - self.z_pad, self.z_max + self.z_pad

    def positions(self) -> np.ndarray:
        return self._positions.copy()

    def n_voxels(self) -> int:
        return sum(len(n.submap) for n in self.nodes)

    def node(self, node_id) -> GraphNode:
        return self.nodes[node_id]

    def allocate_nodes(self, poses) -> list[int]:
        """Spawn a node at every pose farther than ``d_node`` from all nodes."""
        poses = as_poses(poses)
        new = []
        for p in poses[np.argsort(poses[:, 0], kind="stable")]:
            xyz = p[1:4]
            if len(self.nodes):
                d2 = ((self._positions - xyz) ** 2).sum(axis=1)
                if d2.min() <= self.d_node**2:
                    continue
            nid = len(self.nodes)
            self.nodes.append(GraphNode(nid, xyz.copy(), VoxelTable.empty(self.resolution, True)))
            self._positions = np.vstack([self._positions, xyz])
            if nid > 0:
                self.edges.append((nid - 1, nid))
            new.append(nid)
        return new

    def update(self, batch: MapBatch) -> list[int]:
        """Allocate nodes for the batch poses, then merge the batch voxels
        into every node whose cylinder contains some of them.

        Returns:
            ids of the nodes created by this update.
        """
        new = self.allocate_nodes(batch.poses)
        table = batch.table
        if len(table) == 0 or not self.nodes:
            return new
        if table.p_ntr is None:
            raise ValueError("batch voxels carry no collision beliefs")
        cen = key_centers(table.keys, self.resolution)
        lo_xy = cen[:, :2].min(axis=0) - self.r_max
        hi_xy = cen[:, :2].max(axis=0) + self.r_max
        pos = self._positions
        near = np.flatnonzero(((pos[:, :2] >= lo_xy) & (pos[:, :2] <= hi_xy)).all(axis=1))
        zlo, zhi = self.z_bounds
        for nid in near:
            node = self.nodes[nid]
            mask = cylinder_mask(table.keys, self.resolution, node.position, self.r_max, zlo, zhi)
            if mask.any():
                self._merge(node, table.take(np.flatnonzero(mask)))
        return new

    @staticmethod
    def _merge(node: GraphNode, inc: VoxelTable):
        cur = node.submap
        if len(cur) == 0:
            order = np.argsort(inc.packed())
            node.submap = inc.take(order)
            node._packed = None
            return
        cp = node.packed()
        ip = inc.packed()
        pos = np.clip(np.searchsorted(cp, ip), 0, cp.size - 1)
        hit = cp[pos] == ip
        rows_c = pos[hit]
        rows_i = np.flatnonzero(hit)
        newer = inc.t[rows_i] > cur.t[rows_c]
        if newer.any():
            rc, ri = rows_c[newer], rows_i[newer]
            for name in VoxelTable.COLUMNS[1:]:
                getattr(cur, name)[rc] = getattr(inc, name)[ri]
        cur.p_ntr[rows_c] = inc.p_ntr[rows_i]
        fresh = np.flatnonzero(~hit)
        if fresh.size:
            merged = VoxelTable.concat([cur, inc.take(fresh)])
            order = np.argsort(merged.packed(), kind="stable")
            node.submap = merged.take(order)
            node._packed = None

    def training_samples(self, tr_threshold=0.4, ntr_threshold=0.6,
                         occupied_only=False) -> list[TrainingSample]:
        """Labelled voxels of every node.

        Args:
            occupied_only: skip voxels that were never hit (no distribution).
        """
        out = []
        for node in self.nodes:
            sub = node.submap
            if len(sub) == 0:
                continue
            lab = binarize(sub.p_ntr, tr_threshold, ntr_threshold)
            ok = lab >= 0
            if occupied_only:
                ok &= sub.n > 0
            rows = np.flatnonzero(ok)
            if rows.size:
                out.append(TrainingSample(node.id, sub, rows, lab[rows].astype(np.int64)))
        return out

    # checkpoint -------------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = {
            "format_version": FORMAT_VERSION,
            "resolution": self.resolution,
            "nodes": [{"id": n.id, "pos": [float(v) for v in n.position]} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "params": {"d_node": self.d_node, "r_max": self.r_max, "z_min": self.z_min,
                       "z_max": self.z_max, "z_pad": self.z_pad},
        }
        (d / "index.json").write_text(json.dumps(index, indent=1))
        for n in self.nodes:
            n.submap.write_jsonl(d / f"node_{n.id:05d}.jsonl")

    @classmethod
    def load(cls, directory) -> "OGraph":
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        if index.get("format_version") != FORMAT_VERSION:
            raise ValueError("unsupported graph checkpoint version")
        g = cls(index["resolution"], **index["params"])
        for rec in index["nodes"]:
            sub = VoxelTable.read_jsonl(d / f"node_{rec['id']:05d}.jsonl")
            if sub.p_ntr is None:
                sub.p_ntr = np.full(len(sub), 0.5)
            g.nodes.append(GraphNode(rec["id"], np.array(rec["pos"], dtype=float), sub))
        g._positions = np.array([n.position for n in g.nodes]).reshape(-1, 3)
        g.edges = [tuple(e) for e in index["edges"]]
        return g


def allocate_nodes(graph: OGraph, poses) -> list[int]:
    return graph.allocate_nodes(poses)


def update_graph(graph: OGraph, batch: MapBatch) -> OGraph:
    graph.update(batch)
    return graph


def training_samples(graph: OGraph, tr_threshold=0.4, ntr_threshold=0.6, occupied_only=False):
    return graph.training_samples(tr_threshold, ntr_threshold, occupied_only)
