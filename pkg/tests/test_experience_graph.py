import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vegnav.collision_map import NTR, TR, CollisionEvent, CollisionMap, yaw_to_quat
from vegnav.experience_graph import (
    BatchBuilder,
    MapBatch,
    OGraph,
    as_poses,
    build_map_batch,
    fuse_newest,
)
from vegnav.voxel_map import VoxelTable, cylinder_mask, pack_keys


def table(keys, t=0.0, n=1, p_ntr=None, res=0.1):
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    m = len(keys)
    full = lambda v: np.broadcast_to(np.asarray(v), (m,)).copy()
    return VoxelTable(
        res, keys, full(0.5), full(n).astype(np.int64), np.zeros((m, 3)), np.zeros((m, 6)),
        full(n).astype(np.int64), np.zeros(m, np.int64), full(100.0 * n), full(1e4 * n),
        np.zeros(m, np.int64), full(t).astype(float),
        None if p_ntr is None else full(p_ntr).astype(float),
    )


def poses_along_x(xs, t0=0.0):
    return np.array([[t0 + i, x, 0.0, 0.0] for i, x in enumerate(xs)])


class TestMapBatch:
    def test_newest_wins(self):
        a = table([[1, 2, 3]], t=10.0, n=3)
        b = table([[1, 2, 3]], t=20.0, n=7)
        batch = build_map_batch([(10.0, a), (20.0, b)], CollisionMap(), poses_along_x([0.0]))
        assert batch.table.nh.tolist() == [7]

    def test_single_snapshot_identity(self):
        a = table([[0, 0, 0], [1, 0, 0]], t=3.0, n=2)
        batch = build_map_batch([(3.0, a)], CollisionMap(), poses_along_x([0.0]))
        for name in VoxelTable.COLUMNS:
            np.testing.assert_array_equal(getattr(batch.table, name), getattr(a, name))
        np.testing.assert_array_equal(batch.table.p_ntr, [0.5, 0.5])

    def test_builder_matches_batch(self):
        rng = np.random.default_rng(1)
        snaps = [(float(t), table(rng.integers(-3, 3, (20, 3)), t=float(t), n=t + 1)) for t in range(5)]
        snaps = [(t, tb.take(np.unique(tb.packed(), return_index=True)[1])) for t, tb in snaps]
        cm = CollisionMap().apply_event(CollisionEvent(0.0, (0, 0, 0), yaw_to_quat(0), NTR))
        poses = poses_along_x([0.0, 0.3])
        ref = build_map_batch(snaps, cm, poses, (0.0, 5.0))
        bb = BatchBuilder(0.1)
        for p in poses:
            bb.add_pose(p)
        for t, tb in snaps:
            bb.add_snapshot(t, tb)
        got = bb.finish(cm, (0.0, 5.0))
        o1, o2 = np.argsort(ref.table.packed()), np.argsort(got.table.packed())
        for name in VoxelTable.COLUMNS + ("p_ntr",):
            np.testing.assert_array_equal(getattr(ref.table, name)[o1], getattr(got.table, name)[o2])

    def test_fuse_empty(self):
        with pytest.raises(ValueError):
            fuse_newest([])


class TestAllocate:
    def test_straight_line(self):
        g = OGraph()
        xs = np.round(np.arange(0, 2.0001, 0.2), 10)
        new = g.allocate_nodes(poses_along_x(xs))
        assert len(new) == 4
        np.testing.assert_allclose(g.positions()[:, 0], [0.0, 0.6, 1.2, 1.8], atol=1e-9)

    def test_near_existing(self):
        g = OGraph()
        g.allocate_nodes(poses_along_x([0.0]))
        assert g.allocate_nodes(poses_along_x([0.1, 0.3, -0.5])) == []

    def test_single_pose(self):
        g = OGraph()
        assert g.allocate_nodes(poses_along_x([5.0])) == [0]

    def test_pose_columns(self):
        assert as_poses(np.zeros((2, 4))).shape == (2, 8)
        with pytest.raises(ValueError):
            as_poses(np.zeros((2, 5)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_sparsity(self, seed):
        rng = np.random.default_rng(seed)
        steps = rng.normal(0, 0.2, (300, 2)).cumsum(axis=0)
        poses = np.column_stack([np.arange(300.0), steps, np.zeros(300)])
        g = OGraph()
        for chunk in np.array_split(poses, 7):
            g.allocate_nodes(chunk)
        p = g.positions()
        d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
        assert np.all(d[np.triu_indices(len(p), 1)] > 0.5)


def labelled_batch(keys, t, p, poses):
    tb = table(keys, t=t, p_ntr=p)
    return MapBatch(tb, as_poses(poses), (t - 1, t))


class TestUpdate:
    def test_overlap_updates_both(self):
        g = OGraph()
        batch = labelled_batch([[10, 0, 0]], 1.0, 0.9, poses_along_x([0.0, 2.0]))
        g.update(batch)
        assert [len(n.submap) for n in g.nodes] == [1, 1]

    def test_older_batch_ignored(self):
        g = OGraph()
        g.update(labelled_batch([[1, 0, 0]], 5.0, 0.5, poses_along_x([0.0])))
        old = table([[1, 0, 0]], t=2.0, n=9, p_ntr=0.5)
        g.update(MapBatch(old, as_poses(np.zeros((0, 4))), (1.0, 2.0)))
        assert g.nodes[0].submap.n.tolist() == [1]

    def test_label_flip(self):
        g = OGraph()
        cm = CollisionMap()
        ev_tr = CollisionEvent(1.0, (0.0, 0.0, 0.0), yaw_to_quat(0.0), TR)
        cm.apply_event(ev_tr)
        key = [[2, 0, 1]]
        g.update(build_map_batch([(1.0, table(key, t=1.0))], cm, poses_along_x([0.0])))
        assert g.nodes[0].submap.p_ntr[0] == pytest.approx(0.3)
        for i in range(3):
            cm.apply_event(CollisionEvent(2.0 + i, (0.0, 0.0, 0.0), yaw_to_quat(0.0), NTR))
        # the voxel is not re-observed, the batch carries only the fresh label
        g.update(build_map_batch([(2.0, table(key, t=1.0))], cm, poses_along_x([0.0], 2.0)))
        assert g.nodes[0].submap.p_ntr[0] == pytest.approx(cm.p_ntr(np.array(key))[0])
        assert g.nodes[0].submap.p_ntr[0] > 0.6

    def test_missing_labels(self):
        g = OGraph()
        g.allocate_nodes(poses_along_x([0.0]))
        with pytest.raises(ValueError):
            g.update(MapBatch(table([[0, 0, 0]]), as_poses(np.zeros((0, 4))), (0, 1)))


class TestSamples:
    def test_no_collision_data(self):
        g = OGraph()
        g.update(labelled_batch([[0, 0, 0]], 1.0, 0.5, poses_along_x([0.0])))
        assert g.training_samples() == []

    def test_counts(self):
        keys = [[i, 0, 0] for i in range(25)]
        p = np.r_[np.full(5, 0.9), np.full(20, 0.2)]
        g = OGraph(r_max=5.0)
        tb = table(keys, t=1.0)
        tb.p_ntr = p
        g.update(MapBatch(tb, as_poses(poses_along_x([0.0])), (0, 1)))
        (s,) = g.training_samples()
        assert len(s) == 25 and int((s.y == 0).sum()) == 5
        assert len(s.labelled) == 25

    def test_shared_voxel(self):
        g = OGraph()
        g.update(labelled_batch([[10, 0, 0]], 1.0, 0.9, poses_along_x([0.0, 2.0])))
        samples = g.training_samples()
        assert len(samples) == 2
        assert all(s.submap.keys[s.rows].tolist() == [[10, 0, 0]] for s in samples)

    def test_occupied_only(self):
        g = OGraph()
        tb = table([[0, 0, 0], [1, 0, 0]], t=1.0, p_ntr=0.2)
        tb.n[1] = 0
        g.update(MapBatch(tb, as_poses(poses_along_x([0.0])), (0, 1)))
        assert len(g.training_samples(occupied_only=True)[0]) == 1


def random_batches(seed, n_batches=6):
    rng = np.random.default_rng(seed)
    out, t, pos = [], 0.0, np.zeros(2)
    for _ in range(n_batches):
        steps = rng.normal(0, 0.3, (10, 2)).cumsum(axis=0) + pos
        pos = steps[-1]
        ps = np.column_stack([t + np.arange(10) * 0.1, steps, np.zeros(10)])
        keys = np.column_stack([
            np.floor(rng.uniform(pos[0] - 3, pos[0] + 3, 150) / 0.1),
            np.floor(rng.uniform(pos[1] - 3, pos[1] + 3, 150) / 0.1),
            rng.integers(-9, 12, 150),
        ]).astype(np.int64)
        keys = keys[np.unique(pack_keys(keys), return_index=True)[1]]
        tb = table(keys, t=t + 1.0, n=1)
        tb.n = rng.integers(1, 9, len(keys))
        tb.p_ntr = rng.uniform(0, 1, len(keys))
        out.append(MapBatch(tb, ps, (t, t + 1.0)))
        t += 1.0
    return out


class TestInvariants:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_containment_and_idempotence(self, seed):
        g = OGraph()
        batches = random_batches(seed)
        for b in batches:
            g.update(b)
        zlo, zhi = g.z_bounds
        for node in g.nodes:
            assert cylinder_mask(node.submap.keys, 0.1, node.position, 2.0, zlo, zhi).all()
        snap = [(n.submap.copy(), n.position.copy()) for n in g.nodes]
        g.update(batches[-1])
        assert len(g.nodes) == len(snap)
        for node, (sub, _) in zip(g.nodes, snap):
            for name in VoxelTable.COLUMNS + ("p_ntr",):
                np.testing.assert_array_equal(getattr(node.submap, name), getattr(sub, name))

    def test_newest_wins_across_batches(self):
        g = OGraph()
        batches = random_batches(3)
        for b in batches:
            g.update(b)
        latest = {}
        for b in batches:
            for k, n in zip(b.table.packed().tolist(), b.table.n.tolist()):
                latest[k] = n
        for node in g.nodes:
            for k, n in zip(node.submap.packed().tolist(), node.submap.n.tolist()):
                assert latest[k] == n

    def test_memory_bound(self):
        g = OGraph()
        for b in random_batches(5):
            g.update(b)
        per_node = np.pi * 2.0**2 * 1.7 / 0.1**3
        assert g.n_voxels() <= len(g.nodes) * per_node


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        g = OGraph()
        for b in random_batches(2, 3):
            g.update(b)
        g.save(tmp_path / "g")
        h = OGraph.load(tmp_path / "g")
        assert h.edges == g.edges
        np.testing.assert_array_equal(h.positions(), g.positions())
        for a, b in zip(g.nodes, h.nodes):
            for name in VoxelTable.COLUMNS + ("p_ntr",):
                np.testing.assert_array_equal(getattr(a.submap, name), getattr(b.submap, name))
