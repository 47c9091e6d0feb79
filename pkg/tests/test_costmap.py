import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vegnav.costmap import (
    EMPTY,
    OBSERVED,
    VIRTUAL,
    SurfaceGrid,
    cell_cost,
    cost_convert,
    generate_costmap,
    nearest_pose_reference,
    read_costmap,
    support_surface,
    virtual_surface,
)
from vegnav.te_model import TEMap


def te_map(entries, res=0.1):
    """entries: list of (key, p, observed)."""
    keys = np.array([e[0] for e in entries], dtype=np.int64).reshape(-1, 3)
    return TEMap(res, keys, np.array([e[1] for e in entries], float),
                 np.array([e[2] for e in entries], bool))


def loop_fill(p, z, cls, sources, candidates, k, n_adj):
    """Reference fill step written with explicit loops."""
    h = k // 2
    nx, ny = cls.shape
    out_p, out_z, out_c = p.copy(), z.copy(), cls.copy()
    changed = 0
    for u in range(nx):
        for v in range(ny):
            if cls[u, v] != EMPTY or not candidates[u, v]:
                continue
            vals = [(p[a, b], z[a, b]) for a in range(max(0, u - h), min(nx, u + h + 1))
                    for b in range(max(0, v - h), min(ny, v + h + 1)) if sources[a, b]]
            if len(vals) >= n_adj:
                out_p[u, v] = np.mean([x[0] for x in vals])
                out_z[u, v] = np.mean([x[1] for x in vals])
                out_c[u, v] = VIRTUAL
                changed += 1
    return out_p, out_z, out_c, changed


def loop_virtual(grid, k=5, n_adj=5):
    p, z, c = grid.p_bar.copy(), grid.z.copy(), grid.cls.copy()
    if not (c == OBSERVED).any():
        return p, z, c
    p, z, c, _ = loop_fill(p, z, c, c == OBSERVED, np.ones(c.shape, bool), k, n_adj)
    ou, ov = np.nonzero(grid.cls == OBSERVED)
    inside = np.zeros(c.shape, bool)
    inside[ou.min():ou.max() + 1, ov.min():ov.max() + 1] = True
    while True:
        p, z, c, n = loop_fill(p, z, c, c != EMPTY, inside, k, n_adj)
        if n == 0:
            return p, z, c


class TestCost:
    def test_anchors(self):
        assert cell_cost(1.0) == pytest.approx(1.0248, abs=1e-3)
        assert cell_cost(0.5) == pytest.approx(3.2313, abs=1e-3)
        assert cell_cost(0.2) == math.inf
        assert cell_cost(0.3) == math.inf
        assert cell_cost(np.nan) == math.inf

    def test_monotone_sweep(self):
        p = np.linspace(0.3, 1.0, 101)[1:]
        c = cell_cost(p)
        assert np.all(np.diff(c) < 0)
        assert np.all((c > 1.0) & (c <= 11.0))


class TestSupportSurface:
    def test_window_mean(self):
        tm = te_map([((0, 0, 0), 0.9, True), ((0, 0, 1), 0.8, True), ((0, 0, 2), 0.7, True),
                     ((0, 0, 3), 0.1, False)])
        g = support_surface(tm, reference_z=0.0)
        assert g.p_bar[0, 0] == pytest.approx(0.8)
        assert g.z[0, 0] == pytest.approx(0.05)
        assert g.cls[0, 0] == OBSERVED

    def test_overhang_rejected(self):
        tm = te_map([((0, 0, 12), 0.9, True)])
        g = support_surface(tm, reference_z=0.0)
        assert g.cls[0, 0] == EMPTY and np.isnan(g.p_bar[0, 0])

    def test_single_voxel(self):
        g = support_surface(te_map([((3, 4, 0), 0.4, True)]), 0.0)
        assert g.shape == (1, 1) and (g.i0, g.j0) == (3, 4)
        assert g.p_bar[0, 0] == pytest.approx(0.4)

    def test_window_length(self):
        entries = [((0, 0, k), 1.0 if k < 10 else 0.0, True) for k in range(14)]
        assert support_surface(te_map(entries), 0.0).p_bar[0, 0] == pytest.approx(1.0)

    def test_reference_callable(self):
        tm = te_map([((0, 0, 12), 0.7, True), ((1, 0, 12), 0.7, True)])
        ref = nearest_pose_reference(np.array([[0.0, 0.05, 0.0, 1.0], [1.0, 0.5, 0.0, 0.0]]))
        g = support_surface(tm, ref)
        assert g.cls[:, 0].tolist() == [OBSERVED, OBSERVED]
        tm2 = te_map([((20, 0, 12), 0.7, True)])
        assert support_surface(tm2, ref).cls[0, 0] == EMPTY

    def test_empty(self):
        assert support_surface(te_map([]), 0.0).shape == (0, 0)


def uniform_grid(n=20, value=0.6):
    return SurfaceGrid.from_arrays(np.full((n, n), value))


class TestVirtualSurface:
    def test_four_neighbours_stay_empty(self):
        p = np.full((5, 5), np.nan)
        for u, v in [(0, 0), (0, 4), (4, 0), (4, 4)]:
            p[u, v] = 0.6
        g = virtual_surface(SurfaceGrid.from_arrays(p))
        assert g.cls[2, 2] == EMPTY

    def test_six_neighbours(self):
        p = np.full((5, 5), np.nan)
        p[0, :] = 0.6
        p[4, 0] = 0.6
        g = virtual_surface(SurfaceGrid.from_arrays(p))
        assert g.cls[2, 2] == VIRTUAL and g.p_bar[2, 2] == pytest.approx(0.6)

    def test_single_hole(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.4, 1.0, (9, 9))
        z = rng.uniform(0, 1, (9, 9))
        p[4, 4] = np.nan
        g = virtual_surface(SurfaceGrid.from_arrays(p, z))
        win = np.delete(p[2:7, 2:7].ravel(), 12)
        assert g.cls[4, 4] == VIRTUAL
        assert g.p_bar[4, 4] == pytest.approx(win.mean(), abs=1e-12)
        assert g.z[4, 4] == pytest.approx(np.delete(z[2:7, 2:7].ravel(), 12).mean(), abs=1e-12)

    def test_three_cell_hole_pass_one(self):
        # a 3-cell hole in the interior plus a sparse corner patch
        p = np.full((20, 20), 0.8)
        p[10, 10:13] = np.nan
        p[0:3, 0:3] = np.nan
        p[0, 0] = 0.8
        g = SurfaceGrid.from_arrays(p)
        ref = loop_fill(g.p_bar, g.z, g.cls, g.cls == OBSERVED, np.ones(g.shape, bool), 5, 5)
        assert (ref[2][10, 10:13] == VIRTUAL).all()
        out = virtual_surface(g)
        np.testing.assert_array_equal(out.cls, loop_virtual(g)[2])
        assert (out.cls == EMPTY).sum() == 0

    def test_pass_one_ignores_virtual_sources(self):
        # only row 0 observed: the bounding rectangle is that row, so the
        # result is pass 1 alone. Row 3 would fill if pass 1 chained.
        p = np.full((7, 7), np.nan)
        p[0, :] = 0.5
        out = virtual_surface(SurfaceGrid.from_arrays(p))
        assert out.cls[2, 3] == VIRTUAL
        assert (out.cls[3:, :] == EMPTY).all()

    def test_bounded_to_observed_rectangle(self):
        p = np.full((30, 30), np.nan)
        p[10:15, 10:15] = 0.7
        out = virtual_surface(SurfaceGrid.from_arrays(p))
        # pass 1 may reach two cells out; pass 2 may not go further
        assert (out.cls[:8, :] == EMPTY).all() and (out.cls[:, 17:] == EMPTY).all()

    def test_even_kernel(self):
        with pytest.raises(ValueError):
            virtual_surface(uniform_grid(), kernel=4)

    def test_input_untouched(self):
        g = SurfaceGrid.from_arrays(np.where(np.eye(6, dtype=bool), np.nan, 0.5))
        before = g.cls.copy()
        virtual_surface(g)
        np.testing.assert_array_equal(g.cls, before)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.2, 0.8))
    def test_matches_loop_reference(self, seed, density):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 14))
        p = np.where(rng.uniform(size=(n, n)) < density, rng.uniform(0, 1, (n, n)), np.nan)
        z = rng.normal(0, 0.2, (n, n))
        g = SurfaceGrid.from_arrays(p, z)
        out = virtual_surface(g)
        rp, rz, rc = loop_virtual(g)
        np.testing.assert_array_equal(out.cls, rc)
        np.testing.assert_allclose(out.p_bar, rp, atol=1e-12, equal_nan=True)
        np.testing.assert_allclose(out.z, rz, atol=1e-12, equal_nan=True)
        obs = p[~np.isnan(p)]
        v = out.p_bar[out.cls == VIRTUAL]
        if obs.size:
            assert np.all((v >= obs.min() - 1e-12) & (v <= obs.max() + 1e-12))


def random_te_map(seed, n=400):
    rng = np.random.default_rng(seed)
    keys = np.unique(np.column_stack([rng.integers(0, 15, n), rng.integers(0, 15, n),
                                      rng.integers(-2, 12, n)]), axis=0)
    return TEMap(0.1, keys, rng.uniform(0, 1, len(keys)), rng.uniform(size=len(keys)) < 0.8)


class TestPipeline:
    def test_idempotent(self):
        tm = random_te_map(1)
        a = generate_costmap(tm, 0.0)
        b = generate_costmap(tm, 0.0)
        np.testing.assert_array_equal(a.cost, b.cost)
        np.testing.assert_array_equal(a.surface.cls, b.surface.cls)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_fatal_equivalence(self, seed):
        cm = generate_costmap(random_te_map(seed), 0.0)
        g = cm.surface
        expect = (g.cls == EMPTY) | ~(np.nan_to_num(g.p_bar, nan=0.0) > 0.3)
        np.testing.assert_array_equal(cm.fatal, expect)
        finite = cm.cost[np.isfinite(cm.cost)]
        assert np.all((finite > 1.0) & (finite <= 11.0))

    def test_write_read(self, tmp_path):
        cm = generate_costmap(random_te_map(2), 0.0)
        cm.write(tmp_path / "c.txt")
        head, cost = read_costmap(tmp_path / "c.txt")
        assert (head["width"], head["height"]) == cm.cost.shape
        assert head["origin_x"] == pytest.approx(cm.origin[0])
        np.testing.assert_array_equal(cost, cm.cost)
        side = json.loads((tmp_path / "c.txt.json").read_text())
        assert side["cls"][0][0] in ("empty", "observed", "virtual")

    def test_empty_cells_fatal(self):
        g = SurfaceGrid.from_arrays(np.array([[np.nan, 0.9]]))
        cm = cost_convert(g)
        assert cm.fatal.tolist() == [[True, False]]
