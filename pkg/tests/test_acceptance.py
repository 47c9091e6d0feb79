"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The two end-to-end runs (criteria 6 and 7) take several minutes each on a
single CPU and are marked ``slow``.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.special import expit

from vegnav import cli
from vegnav.adaptation import (
    CycleConfig,
    Evaluator,
    OnlineAdapter,
    Strategy,
    initial_state,
    replay_intervals,
    run_cycle,
)
from vegnav.collision_map import NTR, TR, CollisionEvent, CollisionMap, event_bbox_voxels
from vegnav.costmap import EMPTY, VIRTUAL, SurfaceGrid, cell_cost, generate_costmap, virtual_surface
from vegnav.experience_graph import build_map_batch
from vegnav.harness import quadrant, strategy_harness, train_base_model
from vegnav.metrics import Confusion, f1, mcc
from vegnav.sim_world import (
    WorldConfig,
    drive_map,
    evaluation_labels,
    generate_world,
    plan_script,
    run_episode,
)
from vegnav.te_model import TEMap, init_model, loss_and_grads
from vegnav.voxel_map import LidarReturn, VoxelMap, key_centers

from test_costmap import loop_virtual

# MCC of the criterion-6 run, frozen from the first passing build
PINNED_E2E_MCC = 0.6053
E2E_TOLERANCE = 0.05


# ---------------------------------------------------------------------------
# 1. collision map against sequential Bayes


def bayes_oracle(states, p_ntr_collision=0.75, p_ntr_traversal=0.3, clamp=10.0):
    """Posterior P(NTR) by sequential Bayes in probability space."""
    lo_p, hi_p = expit(-clamp), expit(clamp)
    p = 0.5
    for s in states:
        q = p_ntr_collision if s == NTR else p_ntr_traversal
        p = p * q / (p * q + (1 - p) * (1 - q))
        p = min(max(p, lo_p), hi_p)
    return p


def test_c1_collision_bayes_oracle(verdict):
    key = (2, 0, 1)
    ev = lambda s: CollisionEvent(0.0, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), s)
    for s in (TR, NTR):
        assert key in {tuple(k) for k in event_bbox_voxels(ev(s)).tolist()}
    rng = np.random.default_rng(2024)
    seqs = [rng.choice([TR, NTR], size=int(rng.integers(1, 51)), p=[0.5, 0.5]).tolist()
            for _ in range(1000)]
    events = {s: ev(s) for s in (TR, NTR)}
    worst = 0.0
    start = time.perf_counter()
    for seq in seqs:
        cmap = CollisionMap()
        for s in seq:
            cmap.apply_event(events[s])
        got = float(cmap.p_ntr(np.array([key]))[0])
        worst = max(worst, abs(got - bayes_oracle(seq)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 5.0
    assert verdict(1, ok, f"max |posterior - oracle| = {worst:.2e}, runtime {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 2. incremental voxel statistics against batch formulas


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_c2_statistics_oracle(verdict):
    rng = np.random.default_rng(7)
    res = 0.1
    worst = {"mean": 0.0, "cov": 0.0, "i_mean": 0.0, "i_std": 0.0}
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        pts = rng.uniform(0.001, 0.099, (n, 3)).astype(np.float32).astype(float)
        inten = rng.uniform(0.0, 255.0, n).astype(np.float32).astype(float)
        second = rng.uniform(size=n) < 0.1
        vm = VoxelMap(resolution=res)
        # the sensor sits inside the same voxel, so no ray crosses another one
        origin = (0.05, 0.05, 0.05)
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(int(rng.integers(0, 4)), n - 1),
                                  replace=False))
        for t, idx in enumerate(np.split(np.arange(n), cuts)):
            vm.integrate_scan(origin, [LidarReturn(tuple(pts[i]), inten[i], bool(second[i]))
                                       for i in idx], float(t))
        v = vm.voxel((0, 0, 0))
        assert v.n_endpoints == n
        worst["mean"] = max(worst["mean"], rel_err(v.mean, pts.mean(axis=0)))
        worst["cov"] = max(worst["cov"], rel_err(v.covariance, np.cov(pts.T, bias=True)))
        worst["i_mean"] = max(worst["i_mean"], rel_err(v.intensity_mean, inten.mean()))
        worst["i_std"] = max(worst["i_std"], rel_err(v.intensity_std, inten.std()))
    ok = max(worst.values()) < 1e-9
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(2, ok, f"max relative error: {detail}")


# ---------------------------------------------------------------------------
# 3. cost function anchors


def test_c3_cost_anchors(verdict):
    c1, c05, c02 = float(cell_cost(1.0)), float(cell_cost(0.5)), float(cell_cost(0.2))
    sweep = cell_cost(np.linspace(0.3, 1.0, 101)[1:])
    ok = (abs(c1 - 1.0248) <= 1e-3 and abs(c05 - 3.2313) <= 1e-3 and c02 == math.inf
          and bool(np.all(np.diff(sweep) < 0)))
    assert verdict(3, ok, f"cost(1.0)={c1:.4f} cost(0.5)={c05:.4f} cost(0.2)={c02}, "
                          f"sweep strictly decreasing={bool(np.all(np.diff(sweep) < 0))}")


# ---------------------------------------------------------------------------
# 4. experience graph invariants after a 200 m drive


def test_c4_graph_invariants(verdict):
    world = generate_world(WorldConfig(), seed=4)
    # back-offs and blocked legs make the driven path shorter than the plan
    script = plan_script(world, seed=4, duration=1e9, max_length=220.0)
    episode = run_episode(world, script, seed=4)
    xy = episode.poses[:, 1:3]
    driven = float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())

    cfg = CycleConfig(n_adapt=0)
    state = initial_state(Strategy(False, False), cfg)
    g = state.graph
    intervals = list(replay_intervals(episode, cfg.delta_t, cfg.resolution, g.r_max, g.z_bounds))
    for iv in intervals:
        run_cycle(state, iv.t_k, iv.snapshots, iv.events, iv.poses)

    pos = g.positions()
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2))
    min_dist = float(d[np.triu_indices(len(pos), 1)].min())

    zlo, zhi = g.z_bounds
    outside = 0
    for node in g.nodes:
        c = key_centers(node.submap.keys, g.resolution)
        r = np.hypot(c[:, 0] - node.position[0], c[:, 1] - node.position[1])
        dz = c[:, 2] - node.position[2]
        outside += int(((r > g.r_max + 1e-9) | (dz < zlo - 1e-9) | (dz > zhi + 1e-9)).sum())

    before = [(n.position.copy(), n.submap.copy()) for n in g.nodes]
    last = intervals[-1]
    batch = build_map_batch(last.snapshots, state.cmap, last.poses,
                            (last.t_k - cfg.delta_t, last.t_k), resolution=cfg.resolution)
    new = g.update(batch)
    unchanged = not new and len(g.nodes) == len(before)
    for node, (p0, s0) in zip(g.nodes, before):
        s1 = node.submap
        unchanged &= np.array_equal(node.position, p0) and len(s1) == len(s0)
        if unchanged:
            for col in ("keys", "n", "sp", "sppt", "nh", "nm", "t", "p_ntr"):
                unchanged &= np.array_equal(getattr(s1, col), getattr(s0, col))

    ok = driven >= 200.0 and min_dist > 0.5 and outside == 0 and unchanged
    assert verdict(4, ok, f"{len(g.nodes)} nodes over {driven:.1f} m, min node distance "
                          f"{min_dist:.6f} m, voxels outside cylinder {outside}, "
                          f"re-applied batch changes nothing: {unchanged}")


# ---------------------------------------------------------------------------
# 5. gradient check on the full architecture


def test_c5_gradient_check(verdict):
    h = 1e-6
    worst = 0.0
    for draw in range(20):
        rng = np.random.default_rng(100 + draw)
        m = init_model(draw)
        for b in m.biases:
            b += rng.normal(0, 0.1, b.shape)
        n = int(rng.integers(4, 17))
        Xn = rng.normal(0, 1, (n, m.weights[0].shape[0]))
        y = rng.integers(0, 2, n).astype(float)
        w = rng.uniform(0.5, 2.0, n)
        _, ana = loss_and_grads(m, Xn, y, w)
        for p, g in zip(m.params(), ana):
            flat = p.reshape(-1)
            for i in rng.choice(flat.size, size=min(flat.size, 40), replace=False):
                old = flat[i]
                flat[i] = old + h
                lp, _ = loss_and_grads(m, Xn, y, w)
                flat[i] = old - h
                lm, _ = loss_and_grads(m, Xn, y, w)
                flat[i] = old
                num = (lp - lm) / (2 * h)
                a = g.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a) + abs(num), 1e-7))
    assert verdict(5, worst < 1e-4, f"max relative gradient error {worst:.2e} over 20 draws")


# ---------------------------------------------------------------------------
# 6 and 7. end-to-end runs on the default 30 x 30 m world


@pytest.fixture(scope="module")
def e2e_world():
    world = generate_world(WorldConfig(), seed=1)
    q = quadrant(world)
    script = plan_script(world, seed=1, duration=480.0, exclude=q)
    test_map = drive_map(world, q, seed=99).to_table()
    return world, q, script, test_map


@pytest.mark.slow
def test_c6_end_to_end(verdict, e2e_world):
    world, q, script, test_map = e2e_world
    start = time.perf_counter()
    episode = run_episode(world, script, seed=0)
    adapter = OnlineAdapter(Strategy(False, True), CycleConfig(seed=0))
    adapter.run(episode)
    wall = time.perf_counter() - start
    rows, labels = evaluation_labels(world, test_map, q)
    score = Evaluator(test_map, rows, labels)(adapter.model)["mcc"]
    pinned = PINNED_E2E_MCC is None or abs(score - PINNED_E2E_MCC) <= E2E_TOLERANCE
    ok = score >= 0.5 and pinned and wall < 600.0
    assert verdict(6, ok, f"bm0ca1 final MCC {score:.4f} on the held-out quadrant "
                          f"(pinned {PINNED_E2E_MCC}), episode + adaptation {wall:.0f} s")


@pytest.mark.slow
def test_c7_strategy_ordering(verdict, e2e_world):
    world, q, script, test_map = e2e_world
    base, _ = train_base_model()
    res = strategy_harness(world, script, ["bm0ca0", "bm1ca1"], range(5), q,
                           base_model=base, test_map=test_map)
    a, b = res.final("bm0ca0"), res.final("bm1ca1")
    ok = b.mean() >= a.mean() and b.std() <= a.std()
    assert verdict(7, ok, f"final MCC mean/std bm1ca1 {b.mean():.3f}/{b.std():.3f} vs "
                          f"bm0ca0 {a.mean():.3f}/{a.std():.3f} "
                          f"(per seed bm1ca1 {np.round(b, 3).tolist()}, bm0ca0 {np.round(a, 3).tolist()})")


# ---------------------------------------------------------------------------
# 8. metric anchors


def test_c8_metric_anchors(verdict):
    c = Confusion(tp=50, tn=40, fp=5, fn=5)
    m, f = mcc(c), f1(c)
    rng = np.random.default_rng(8)
    swap_ok = True
    for _ in range(100):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 1000, 4))
        r = Confusion(tp, tn, fp, fn)
        swap_ok &= abs(mcc(r.swapped()) - mcc(r)) <= 1e-12
        swap_ok &= mcc(Confusion(tn, tp, fn, fp)) == pytest.approx(mcc(r), abs=1e-12)
    ok = abs(m - 0.7980) <= 1e-4 and abs(f - 0.9091) <= 1e-4 and swap_ok
    assert verdict(8, ok, f"MCC {m:.4f}, F1 {f:.4f}, class swap holds on 100 draws: {swap_ok}")


# ---------------------------------------------------------------------------
# 9. costmap pipeline on a crafted grid


def crafted_grid():
    rng = np.random.default_rng(9)
    p = rng.uniform(0.1, 1.0, (20, 20))
    z = rng.normal(0.0, 0.05, (20, 20))
    hole = [(9, 9), (9, 10), (10, 9)]
    for c in hole:
        p[c] = np.nan
    # an unobserved corner where pass 1 cannot reach the inner cells
    p[14:, 14:] = np.nan
    return p, z, hole


def observed_window(p, u, v, k=5):
    h = k // 2
    win = p[max(0, u - h):u + h + 1, max(0, v - h):v + h + 1]
    return win[~np.isnan(win)]


def test_c9_costmap_pipeline(verdict):
    p, z, hole = crafted_grid()
    grid = SurfaceGrid.from_arrays(p, z)

    # pass 1 alone: a cell fills iff it sees at least 5 observed neighbours
    first = virtual_surface(grid, max_iter=0)
    pass1_ok = True
    n_starved = 0
    for u, v in zip(*np.nonzero(np.isnan(p))):
        obs = observed_window(p, u, v)
        if obs.size >= 5:
            pass1_ok &= first.cls[u, v] == VIRTUAL and abs(first.p_bar[u, v] - obs.mean()) < 1e-12
        else:
            n_starved += 1
            pass1_ok &= first.cls[u, v] == EMPTY
    hole_ok = all(first.cls[c] == VIRTUAL for c in hole)

    full = virtual_surface(grid)
    rp, rz, rc = loop_virtual(grid)
    oracle_ok = np.array_equal(full.cls, rc) and np.allclose(full.p_bar, rp, atol=1e-12, equal_nan=True)

    # whole pipeline from a TE map with one ground voxel per observed cell
    u, v = np.nonzero(~np.isnan(p))
    keys = np.column_stack([u, v, np.zeros_like(u)])
    te = TEMap(0.1, keys, p[u, v], np.ones(u.size, bool))
    cm1, cm2 = generate_costmap(te, 0.0), generate_costmap(te, 0.0)
    again = virtual_surface(cm1.surface)
    idem = (np.array_equal(cm1.cost, cm2.cost)
            and np.array_equal(again.cls, cm1.surface.cls)
            and np.array_equal(again.p_bar, cm1.surface.p_bar, equal_nan=True))
    s = cm1.surface
    fatal_expect = (s.cls == EMPTY) | ~(np.nan_to_num(s.p_bar, nan=0.0) > 0.3)
    fatal_ok = np.array_equal(cm1.fatal, fatal_expect) and bool(fatal_expect.any())

    ok = pass1_ok and hole_ok and n_starved > 0 and oracle_ok and idem and fatal_ok
    assert verdict(9, bool(ok), f"pass-1 rule holds: {pass1_ok} ({n_starved} starved cells stay "
                                f"empty), 3-cell hole filled: {hole_ok}, matches loop oracle: "
                                f"{oracle_ok}, idempotent: {idem}, fatal rule: {fatal_ok}")


# ---------------------------------------------------------------------------
# 10. deterministic adapt runs


def test_c10_adapt_determinism(verdict, tmp_path):
    run = lambda *argv: cli.main([str(a) for a in argv])
    d = tmp_path
    assert run("gen-world", "--seed", 1, "--out", d / "w.json") == 0
    assert run("gen-script", "--world", d / "w.json", "--seed", 2, "--duration", 120,
               "--out", d / "s.json") == 0
    assert run("episode", "--world", d / "w.json", "--script", d / "s.json", "--seed", 3,
               "--out", d / "ep.jsonl") == 0
    for out in ("a", "b"):
        assert run("adapt", "--episode", d / "ep.jsonl", "--strategy", "bm0ca1",
                   "--out-dir", d / out) == 0
    same = {name: (d / "a" / name).read_bytes() == (d / "b" / name).read_bytes()
            for name in ("model.json", "cycles.jsonl")}
    n_cycles = len((d / "a" / "cycles.jsonl").read_text().splitlines())
    trained = sum(json.loads(line)["trained"] for line in (d / "a" / "cycles.jsonl").read_text().splitlines())
    ok = all(same.values()) and trained > 0
    assert verdict(10, ok, f"byte-identical {same} over {n_cycles} cycles ({trained} trained)")
