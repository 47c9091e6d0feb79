"""Deterministic synthetic vegetated world.

The world has a planar ground, rigid vertical trunks and ellipsoidal
vegetation clusters. Pliable clusters can be driven through; non-pliable ones
have a rigid core. A two-return lidar is simulated by analytic ray
intersection, and a scripted operator drives a box-shaped robot through the
world, producing scans, poses and collision events.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .collision_map import NTR, TR, CollisionEvent, event_box, yaw_to_quat
from .te_model import region_mask
from .voxel_map import RETURN_DTYPE, VoxelMap, key_centers

FORMAT_VERSION = 1

GROUND, TRUNK, VEG = 0, 1, 2
# intensity mean/std per material, sensor units
TRUNK_INTENSITY = (90.0, 20.0)
GROUND_INTENSITY = (60.0, 15.0)
VEG_INTENSITY = (180.0, 30.0)

SENSOR_HEIGHT = 0.5
ROBOT_DIMS = (0.6, 0.4, 0.4)
EVENT_PERIOD = 0.5
GT_GROUND_BAND = 1.0


@dataclass(frozen=True)
class Ground:
    z0: float = 0.02
    slope_x: float = 0.0
    slope_y: float = 0.0

    def height(self, x, y):
        return self.z0 + self.slope_x * np.asarray(x, dtype=float) + self.slope_y * np.asarray(y, dtype=float)


@dataclass(frozen=True)
class Trunk:
    x: float
    y: float
    radius: float
    height: float


@dataclass(frozen=True)
class VegCluster:
    center: tuple
    radii: tuple
    density: float
    pass_prob: float
    pliable: bool
    intensity_mu: float = VEG_INTENSITY[0]
    intensity_sigma: float = VEG_INTENSITY[1]
    core_fraction: float = 0.5

    @property
    def core_radii(self):
        return tuple(r * self.core_fraction for r in self.radii)


@dataclass
class WorldConfig:
    extent: float = 30.0
    n_trunks: int = 24
    trunk_radius: tuple = (0.12, 0.3)
    trunk_height: tuple = (3.0, 8.0)
    trunk_spacing: float = 2.5
    n_veg: int = 30
    veg_radius_xy: tuple = (0.4, 1.2)
    veg_radius_z: tuple = (0.3, 0.7)
    pliable_fraction: float = 0.6
    pass_prob_pliable: tuple = (0.6, 0.9)
    pass_prob_rigid: tuple = (0.15, 0.35)
    density_pliable: float = 200.0
    density_rigid: float = 800.0
    core_fraction: float = 0.5
    ground: dict = field(default_factory=lambda: {"z0": 0.02, "slope_x": 0.0, "slope_y": 0.0})
    border: float = 1.0
    max_attempts: int = 50

    @classmethod
    def from_json(cls, obj: dict) -> "WorldConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return cls(**kw)


@dataclass
class World:
    seed: int
    extent: float
    ground: Ground
    trunks: list
    veg: list
    second_return_prob: float = 0.5
    range_noise: float = 0.01
    max_range: float = 15.0

    def contains(self, x, y) -> bool:
        return 0.0 <= x <= self.extent and 0.0 <= y <= self.extent

    def trunk_array(self) -> np.ndarray:
        return np.array([[t.x, t.y, t.radius, t.height] for t in self.trunks]).reshape(-1, 4)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "extent": self.extent,
            "ground": asdict(self.ground),
            "trunks": [asdict(t) for t in self.trunks],
            "veg": [{**asdict(v), "center": list(v.center), "radii": list(v.radii)} for v in self.veg],
            "second_return_prob": self.second_return_prob,
            "range_noise": self.range_noise,
            "max_range": self.max_range,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "World":
        if obj.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError("unsupported world format")
        return cls(
            seed=obj["seed"],
            extent=obj["extent"],
            ground=Ground(**obj["ground"]),
            trunks=[Trunk(**t) for t in obj["trunks"]],
            veg=[VegCluster(**{**v, "center": tuple(v["center"]), "radii": tuple(v["radii"])})
                 for v in obj["veg"]],
            second_return_prob=obj.get("second_return_prob", 0.5),
            range_noise=obj.get("range_noise", 0.01),
            max_range=obj.get("max_range", 15.0),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_json(json.loads(Path(path).read_text()))


def generate_world(config: WorldConfig | None = None, seed: int = 0) -> World:
    """Random world: Poisson-disk trunks and vegetation clusters.

    Raises:
        ValueError: if the trunks cannot be placed at the requested spacing.
    """
    cfg = config or WorldConfig()
    if cfg.extent <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    ground = Ground(**cfg.ground)
    lo, hi = cfg.border, cfg.extent - cfg.border
    if hi <= lo and (cfg.n_trunks or cfg.n_veg):
        raise ValueError("world too small for its border")

    trunks = []
    pts = np.zeros((0, 2))
    attempts = 0
    while len(trunks) < cfg.n_trunks:
        attempts += 1
        if attempts > cfg.max_attempts * max(cfg.n_trunks, 1):
            raise ValueError(f"cannot place {cfg.n_trunks} trunks {cfg.trunk_spacing} m apart")
        p = rng.uniform(lo, hi, size=2)
        if len(pts) and (((pts - p) ** 2).sum(axis=1) < cfg.trunk_spacing**2).any():
            continue
        r = rng.uniform(*cfg.trunk_radius)
        h = rng.uniform(*cfg.trunk_height)
        trunks.append(Trunk(float(p[0]), float(p[1]), float(r), float(h)))
        pts = np.vstack([pts, p])

    veg = []
    for _ in range(cfg.n_veg):
        x, y = rng.uniform(lo, hi, size=2)
        rxy = rng.uniform(*cfg.veg_radius_xy, size=2)
        rz = rng.uniform(*cfg.veg_radius_z)
        pliable = bool(rng.uniform() < cfg.pliable_fraction)
        pp = rng.uniform(*(cfg.pass_prob_pliable if pliable else cfg.pass_prob_rigid))
        cz = float(ground.height(x, y)) + 0.8 * rz
        veg.append(VegCluster(
            center=(float(x), float(y), cz), radii=(float(rxy[0]), float(rxy[1]), float(rz)),
            density=cfg.density_pliable if pliable else cfg.density_rigid,
            pass_prob=float(pp), pliable=pliable, core_fraction=cfg.core_fraction,
        ))
    return World(seed=seed, extent=cfg.extent, ground=ground, trunks=trunks, veg=veg)


# ---------------------------------------------------------------------------
# ground truth


def _box_hits_trunks(world: World, lo, hi) -> np.ndarray:
    """Axis-aligned boxes (N, 3) x2 intersecting any trunk."""
    out = np.zeros(lo.shape[0], dtype=bool)
    for t in world.trunks:
        cx = np.clip(t.x, lo[:, 0], hi[:, 0])
        cy = np.clip(t.y, lo[:, 1], hi[:, 1])
        near = (cx - t.x) ** 2 + (cy - t.y) ** 2 <= t.radius**2
        g = float(world.ground.height(t.x, t.y))
        zok = (hi[:, 2] > g - 0.5) & (lo[:, 2] < g + t.height)
        out |= near & zok
    return out


def _box_hits_cores(world: World, lo, hi) -> np.ndarray:
    out = np.zeros(lo.shape[0], dtype=bool)
    for v in world.veg:
        if v.pliable:
            continue
        c = np.array(v.center)
        r = np.array(v.core_radii)
        q = np.clip(c, lo, hi)
        out |= (((q - c) / r) ** 2).sum(axis=1) <= 1.0
    return out


def ground_truth(world: World, keys, resolution) -> np.ndarray:
    """Per-voxel truth: 1 TR, 0 NTR, -1 undefined (far above or below ground).

    A voxel is NTR when its cube intersects a trunk or the core of a rigid
    vegetation cluster, TR otherwise if its center is within 1 m of the ground.
    """
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    lo = keys * resolution
    hi = lo + resolution
    cen = key_centers(keys, resolution)
    ntr = _box_hits_trunks(world, lo, hi) | _box_hits_cores(world, lo, hi)
    near = np.abs(cen[:, 2] - world.ground.height(cen[:, 0], cen[:, 1])) <= GT_GROUND_BAND
    out = np.full(keys.shape[0], -1, dtype=np.int8)
    out[near] = 1
    out[ntr] = 0
    return out


# ---------------------------------------------------------------------------
# lidar


@dataclass(frozen=True)
class RayPattern:
    """Spinning lidar rings: elevations in degrees times azimuth steps."""

    elevations: tuple = tuple(np.linspace(-30.0, 15.0, 16).tolist())
    n_azimuth: int = 360

    def directions(self, yaw=0.0) -> np.ndarray:
        el = np.radians(np.asarray(self.elevations))
        az = yaw + np.arange(self.n_azimuth) * (2 * np.pi / self.n_azimuth)
        E, A = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)


def _ray_ground(world, o, d):
    g = world.ground
    denom = d[:, 2] - g.slope_x * d[:, 0] - g.slope_y * d[:, 1]
    num = g.z0 + g.slope_x * o[0] + g.slope_y * o[1] - o[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    return np.where((denom != 0) & (t > 0), t, np.inf)


def _ray_trunks(world, o, d, near):
    t_best = np.full(d.shape[0], np.inf)
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    for tr in near:
        ox, oy = o[0] - tr.x, o[1] - tr.y
        b = 2 * (ox * d[:, 0] + oy * d[:, 1])
        c = ox * ox + oy * oy - tr.radius**2
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a)
        z = o[2] + t * d[:, 2]
        g = float(world.ground.height(tr.x, tr.y))
        ok &= (t > 0) & (z >= g - 0.5) & (z <= g + tr.height)
        t_best = np.where(ok & (t < t_best), t, t_best)
    return t_best


def _ray_ellipsoids(o, d, near):
    """Entry/exit parameters (R, V); inf where the ray misses."""
    R = d.shape[0]
    t_in = np.full((R, len(near)), np.inf)
    t_out = np.full((R, len(near)), np.inf)
    for j, v in enumerate(near):
        r = np.array(v.radii)
        oo = (o - np.array(v.center)) / r
        dd = d / r
        a = (dd * dd).sum(axis=1)
        b = 2 * (dd @ oo)
        c = oo @ oo - 1.0
        disc = b * b - 4 * a * c
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        ok &= t1 > 0
        t_in[ok, j] = np.maximum(t0[ok], 0.0)
        t_out[ok, j] = t1[ok]
    return t_in, t_out


def simulate_scan(world: World, sensor_pose, pattern: RayPattern | None = None, rng=None) -> np.ndarray:
    """Two-return lidar scan from ``sensor_pose`` = (x, y, z, yaw).

    Per ray: trunks and ground terminate the ray with a return. Each crossed
    vegetation cluster produces a return with probability ``1 - pass_prob``
    at a uniform depth along its chord. If the first return is vegetation, the
    next surface along the ray is reported as a second return with
    probability ``world.second_return_prob``.

    Returns:
        structured array of RETURN_DTYPE.
    """
    pattern = pattern or RayPattern()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x, y, z, yaw = sensor_pose
    o = np.array([x, y, z], dtype=float)
    d = pattern.directions(yaw)
    R = d.shape[0]
    reach = world.max_range
    near_t = [t for t in world.trunks if math.hypot(t.x - x, t.y - y) <= reach + t.radius]
    near_v = [v for v in world.veg
              if math.hypot(v.center[0] - x, v.center[1] - y) <= reach + max(v.radii)]

    t_ground = _ray_ground(world, o, d)
    t_trunk = _ray_trunks(world, o, d, near_t)
    t_term = np.minimum(np.minimum(t_ground, t_trunk), np.inf)
    term_mat = np.where(t_trunk < t_ground, TRUNK, GROUND)
    term_ok = t_term <= reach

    V = len(near_v)
    u_hit = rng.uniform(size=(R, V))
    u_depth = rng.uniform(size=(R, V))
    u_second = rng.uniform(size=R)
    noise = rng.normal(0.0, world.range_noise, size=(R, 2))
    u_int = rng.normal(size=(R, 2))

    if V:
        t_in, t_out = _ray_ellipsoids(o, d, near_v)
        limit = np.minimum(t_term, reach)[:, None]
        crossed = t_in < limit
        passp = np.array([v.pass_prob for v in near_v])
        returned = crossed & (u_hit < 1.0 - passp)
        with np.errstate(invalid="ignore"):
            depth = t_in + u_depth * (np.minimum(t_out, limit) - t_in)
        depth = np.where(returned, depth, np.inf)
        order = np.argsort(depth, axis=1, kind="stable")
        first_j = order[:, 0]
        first_t = depth[np.arange(R), first_j]
        second_v_t = depth[np.arange(R), order[:, 1]] if V > 1 else np.full(R, np.inf)
        second_j = order[:, 1] if V > 1 else np.zeros(R, dtype=int)
    else:
        first_t = np.full(R, np.inf)
        first_j = np.zeros(R, dtype=int)
        second_v_t = np.full(R, np.inf)
        second_j = np.zeros(R, dtype=int)

    veg_first = np.isfinite(first_t)
    # first return
    r1_t = np.where(veg_first, first_t, np.where(term_ok, t_term, np.inf))
    r1_mat = np.where(veg_first, VEG, term_mat)
    r1_j = first_j
    # optional second return behind a vegetation first return
    cand_v = second_v_t
    cand_term = np.where(term_ok, t_term, np.inf)
    r2_is_veg = cand_v < cand_term
    r2_t = np.where(r2_is_veg, cand_v, cand_term)
    r2_mat = np.where(r2_is_veg, VEG, term_mat)
    emit2 = veg_first & np.isfinite(r2_t) & (u_second < world.second_return_prob)

    def intensity(mat, j, u):
        mu = np.where(mat == TRUNK, TRUNK_INTENSITY[0], GROUND_INTENSITY[0])
        sd = np.where(mat == TRUNK, TRUNK_INTENSITY[1], GROUND_INTENSITY[1])
        if V:
            vmu = np.array([v.intensity_mu for v in near_v])[j]
            vsd = np.array([v.intensity_sigma for v in near_v])[j]
            mu = np.where(mat == VEG, vmu, mu)
            sd = np.where(mat == VEG, vsd, sd)
        return np.maximum(mu + sd * u, 0.0)

    parts = []
    for mask, tt, mat, j, k, ret in (
        (np.isfinite(r1_t), r1_t, r1_mat, r1_j, 0, 0),
        (emit2, r2_t, r2_mat, second_j, 1, 1),
    ):
        idx = np.flatnonzero(mask)
        rng_t = tt[idx] + noise[idx, k]
        p = o + d[idx] * rng_t[:, None]
        block = np.zeros(idx.size, dtype=RETURN_DTYPE)
        block["x"], block["y"], block["z"] = p[:, 0], p[:, 1], p[:, 2]
        block["intensity"] = intensity(mat[idx], j[idx], u_int[idx, k])
        block["ret"] = ret
        parts.append((idx, block))
    # interleave so each ray's second return follows its first
    idx = np.concatenate([parts[0][0], parts[1][0]])
    blk = np.concatenate([parts[0][1], parts[1][1]])
    order = np.lexsort((blk["ret"], idx))
    return blk[order]


# ---------------------------------------------------------------------------
# robot


@dataclass
class RobotState:
    x: float
    y: float
    yaw: float
    t: float = 0.0
    stuck: bool = False
    last_tr: float = -math.inf
    last_ntr: float = -math.inf

    def pose(self, world: World):
        z = float(world.ground.height(self.x, self.y))
        return (self.x, self.y, z)


@dataclass(frozen=True)
class DriveCommand:
    v: float
    omega: float = 0.0


def _local_points(box, nx=7, ny=5, nz=4):
    x0, x1, y0, y1, z0, z1 = box
    g = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny), np.linspace(z0, z1, nz),
                    indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def box_hits_rigid(world: World, x, y, yaw, box, margin=0.0) -> bool:
    """Whether an oriented local box at pose (x, y, yaw) touches rigid geometry."""
    x0, x1, y0, y1, z0, z1 = box
    c, s = math.cos(yaw), math.sin(yaw)
    gz = float(world.ground.height(x, y))
    reach = max(abs(x0), abs(x1)) + max(abs(y0), abs(y1))
    for t in world.trunks:
        dx, dy = t.x - x, t.y - y
        if dx * dx + dy * dy > (reach + t.radius + margin) ** 2:
            continue
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        qx = min(max(lx, x0), x1)
        qy = min(max(ly, y0), y1)
        if (lx - qx) ** 2 + (ly - qy) ** 2 <= (t.radius + margin) ** 2:
            return True
    pts = None
    for v in world.veg:
        if v.pliable:
            continue
        cr = np.array(v.core_radii) + margin
        if math.hypot(v.center[0] - x, v.center[1] - y) > reach + cr[:2].max():
            continue
        if pts is None:
            lp = _local_points(box)
            pts = np.stack([x + c * lp[:, 0] - s * lp[:, 1], y + s * lp[:, 0] + c * lp[:, 1],
                            gz + lp[:, 2]], axis=1)
        if ((((pts - np.array(v.center)) / cr) ** 2).sum(axis=1) <= 1.0).any():
            return True
    return False


def footprint_hits(world: World, x, y, yaw, dims=ROBOT_DIMS, margin=0.0) -> bool:
    return box_hits_rigid(world, x, y, yaw, event_box(TR, dims), margin)


def _event(world, state, kind):
    return CollisionEvent(round(state.t, 9), state.pose(world), yaw_to_quat(state.yaw), kind)


def step_robot(world: World, state: RobotState, command: DriveCommand, dt: float,
               dims=ROBOT_DIMS):
    """Advance the robot by ``dt``.

    Rigid contact blocks the motion and, when driving forward, reports an NTR
    event (at most every 0.5 s while pushing). Free forward motion reports TR
    events at the same period. Reversing clears ``stuck`` and reports nothing.

    Returns:
        (new state, CollisionEvent or None)
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = RobotState(**asdict(state))
    s.t = state.t + dt
    yaw = s.yaw + command.omega * dt
    if command.omega and not footprint_hits(world, s.x, s.y, yaw, dims):
        s.yaw = math.atan2(math.sin(yaw), math.cos(yaw))
    nx = s.x + command.v * dt * math.cos(s.yaw)
    ny = s.y + command.v * dt * math.sin(s.yaw)
    event = None
    if command.v == 0:
        return s, None
    if footprint_hits(world, nx, ny, s.yaw, dims):
        s.stuck = True
        if command.v > 0 and s.t - s.last_ntr >= EVENT_PERIOD - 1e-9:
            s.last_ntr = s.t
            event = _event(world, s, NTR)
        return s, event
    s.x, s.y = nx, ny
    if command.v < 0:
        s.stuck = False
        return s, None
    s.stuck = False
    if s.t - s.last_tr >= EVENT_PERIOD - 1e-9:
        s.last_tr = s.t
        event = _event(world, s, TR)
    return s, event


# ---------------------------------------------------------------------------
# operator script and episodes

BEHAVIOURS = ("drive", "deliberate_collide", "back_off")


@dataclass
class Leg:
    to: tuple
    behavior: str = "drive"

    def __post_init__(self):
        if self.behavior not in BEHAVIOURS:
            raise ValueError(f"unknown behaviour {self.behavior!r}")


@dataclass
class OperatorScript:
    start: tuple
    legs: list
    speed: float = 0.5
    hold: float = 1.0

    def to_json(self) -> dict:
        return {"start": list(self.start), "speed": self.speed, "hold": self.hold,
                "legs": [{"to": list(l.to), "behavior": l.behavior} for l in self.legs]}

    @classmethod
    def from_json(cls, obj) -> "OperatorScript":
        return cls(tuple(obj["start"]), [Leg(tuple(l["to"]), l.get("behavior", "drive"))
                                         for l in obj.get("legs", [])],
                   obj.get("speed", 0.5), obj.get("hold", 1.0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "OperatorScript":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class EpisodeLog:
    """Stamped poses, lidar scans and collision events of one run.

    Poses are rows (t, x, y, z, qw, qx, qy, qz); scans are
    (t, sensor origin, RETURN_DTYPE block).
    """

    header: dict
    poses: np.ndarray
    scans: list
    events: list

    @property
    def world(self) -> World | None:
        w = self.header.get("world")
        return None if w is None else World.from_json(w)

    @property
    def duration(self) -> float:
        return float(self.poses[-1, 0]) if len(self.poses) else 0.0

    def write(self, path):
        """JSON Lines log plus a ``.bin`` side-car holding the scan points."""
        path = Path(path)
        bin_path = Path(str(path) + ".bin")
        records = [(0.0, -1, {"type": "header", **self.header, "points_file": bin_path.name})]
        for p in self.poses:
            records.append((p[0], 0, {"type": "pose", "t": float(p[0]), "pos": p[1:4].tolist(),
                                      "quat": p[4:8].tolist()}))
        for ev in self.events:
            records.append((ev.t, 1, {"type": "event", **ev.to_json()}))
        offset = 0
        with bin_path.open("wb") as fb:
            for t, origin, block in self.scans:
                fb.write(block.tobytes())
                records.append((t, 2, {"type": "scan", "t": float(t),
                                       "origin": [float(v) for v in origin],
                                       "offset": offset, "count": int(block.size)}))
                offset += block.size
        records.sort(key=lambda r: (r[0], r[1]))
        with path.open("w") as fh:
            for _, _, rec in records:
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read(cls, path) -> "EpisodeLog":
        path = Path(path)
        header, poses, scans, events = None, [], [], []
        lines = path.read_text().splitlines()
        recs = [json.loads(s) for s in lines if s.strip()]
        if not recs or recs[0].get("type") != "header":
            raise ValueError("episode log must start with a header record")
        header = {k: v for k, v in recs[0].items() if k not in ("type", "points_file")}
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError("unsupported episode format")
        pts = np.fromfile(path.parent / recs[0]["points_file"], dtype=RETURN_DTYPE)
        for r in recs[1:]:
            kind = r["type"]
            if kind == "pose":
                poses.append([r["t"], *r["pos"], *r["quat"]])
            elif kind == "event":
                events.append(CollisionEvent.from_json(r))
            elif kind == "scan":
                scans.append((r["t"], np.array(r["origin"]), pts[r["offset"]:r["offset"] + r["count"]]))
            else:
                raise ValueError(f"unknown record type {kind!r}")
        return cls(header, np.array(poses, dtype=float).reshape(-1, 8), scans, events)


def _check_script(world: World, script: OperatorScript):
    for p in [script.start] + [l.to for l in script.legs]:
        if not world.contains(p[0], p[1]):
            raise ValueError(f"waypoint {tuple(p[:2])} lies outside the world")


def _heading(state, target):
    return math.atan2(target[1] - state.y, target[0] - state.x)


def run_episode(world: World, script: OperatorScript, scan_rate=2.0, seed=0, dt=0.1,
                pattern: RayPattern | None = None, dims=ROBOT_DIMS) -> EpisodeLog:
    """Execute an operator script and record everything the robot senses."""
    _check_script(world, script)
    pattern = pattern or RayPattern()
    rng = np.random.default_rng(seed)
    x, y, yaw = script.start
    st = RobotState(float(x), float(y), float(yaw))
    poses, scans, events = [], [], []
    scan_dt = 1.0 / scan_rate
    steps_per_scan = max(int(round(scan_dt / dt)), 1)
    step_count = 0

    def record_pose(s):
        px, py, pz = s.pose(world)
        poses.append([round(s.t, 9), px, py, pz, *yaw_to_quat(s.yaw)])

    def scan(s):
        px, py, pz = s.pose(world)
        origin = (px, py, pz + SENSOR_HEIGHT)
        scans.append((round(s.t, 9), np.array(origin), simulate_scan(world, (*origin, s.yaw), pattern, rng)))

    record_pose(st)
    if not script.legs:
        return EpisodeLog(_header(world, script, scan_rate, seed, dt, dims, pattern), np.array(poses), [], [])
    scan(st)

    def advance(cmd):
        nonlocal st, step_count
        st, ev = step_robot(world, st, cmd, dt, dims)
        step_count += 1
        record_pose(st)
        if ev is not None:
            events.append(ev)
        if step_count % steps_per_scan == 0:
            scan(st)

    for leg in script.legs:
        target = leg.to
        dist = math.hypot(target[0] - st.x, target[1] - st.y)
        budget = int(math.ceil((dist / script.speed + script.hold + 5.0) / dt))
        tol = script.speed * dt * 0.5
        if leg.behavior == "back_off":
            for _ in range(budget):
                if math.hypot(target[0] - st.x, target[1] - st.y) <= tol:
                    break
                advance(DriveCommand(-script.speed))
                if st.stuck:
                    break
            continue
        # turn in place to face the waypoint
        if dist > tol:
            want = _heading(st, target)
            turn = math.atan2(math.sin(want - st.yaw), math.cos(want - st.yaw))
            if footprint_hits(world, st.x, st.y, want, dims):
                continue
            advance(DriveCommand(0.0, turn / dt))
        held = 0.0
        for _ in range(budget):
            if math.hypot(target[0] - st.x, target[1] - st.y) <= tol:
                break
            advance(DriveCommand(script.speed))
            if st.stuck:
                if leg.behavior == "drive":
                    break
                held += dt
                if held >= script.hold - 1e-9:
                    break
    return EpisodeLog(_header(world, script, scan_rate, seed, dt, dims, pattern),
                      np.array(poses, dtype=float), scans, events)


def _header(world, script, scan_rate, seed, dt, dims, pattern):
    return {"format_version": FORMAT_VERSION, "seed": seed, "scan_rate": scan_rate, "dt": dt,
            "robot_dims": list(dims), "sensor_height": SENSOR_HEIGHT,
            "pattern": {"elevations": list(pattern.elevations), "n_azimuth": pattern.n_azimuth},
            "script": script.to_json(), "world": world.to_json()}


# ---------------------------------------------------------------------------
# script planning and test surveys


def _segment_clear(world, a, b, dims, margin, step=0.1):
    yaw = math.atan2(b[1] - a[1], b[0] - a[0])
    n = max(int(math.hypot(b[0] - a[0], b[1] - a[1]) / step), 1)
    for i in range(n + 1):
        f = i / n
        x, y = a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])
        if footprint_hits(world, x, y, yaw, dims, margin):
            return False
    return True


def _spot_clear(world, p, dims, margin):
    half_diag = 0.5 * math.hypot(dims[0], dims[1])
    box = (-half_diag, half_diag, -half_diag, half_diag, 0.0, dims[2])
    return not box_hits_rigid(world, p[0], p[1], 0.0, box, margin)


def _in_region(p, region):
    x0, y0, x1, y1 = region
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def plan_script(world: World, seed=0, duration=480.0, speed=0.5, exclude=None,
                collide_every=25.0, dims=ROBOT_DIMS, margin=0.25, max_length=None,
                region=None) -> OperatorScript:
    """Random exploration with deliberate collisions from varied directions.

    Args:
        exclude: xy rectangle (x0, y0, x1, y1) the robot must stay out of,
            e.g. a held-out test quadrant.
        collide_every: seconds of driving between deliberate collisions.
        max_length: optional cap on the driven path length in meters.
        region: optional xy rectangle the robot must stay inside.
    """
    rng = np.random.default_rng(seed)
    border = 1.5
    area = (border, border, world.extent - border, world.extent - border)
    if region is not None:
        area = (max(area[0], region[0] + 0.5), max(area[1], region[1] + 0.5),
                min(area[2], region[2] - 0.5), min(area[3], region[3] - 0.5))

    def allowed(p):
        return _in_region(p, area) and (exclude is None or not _in_region(p, _grow(exclude, 1.0)))

    for _ in range(2000):
        start = rng.uniform(area[0], area[2], size=2)
        if allowed(start) and _spot_clear(world, start, dims, margin):
            break
    else:
        raise ValueError("no free start position")
    pos = (float(start[0]), float(start[1]))
    legs, elapsed, since, length = [], 0.0, 0.0, 0.0
    heading = rng.uniform(-math.pi, math.pi)
    rigid = [(t.x, t.y, t.radius) for t in world.trunks] + [
        (v.center[0], v.center[1], min(v.core_radii[:2])) for v in world.veg if not v.pliable]

    while elapsed < duration and (max_length is None or length < max_length):
        if since >= collide_every:
            plan = _plan_collision(world, pos, rigid, rng, dims, margin, allowed)
            if plan is not None:
                approach, target = plan
                d = math.hypot(approach[0] - pos[0], approach[1] - pos[1])
                d2 = math.hypot(target[0] - approach[0], target[1] - approach[1])
                legs += [Leg(approach, "drive"), Leg(target, "deliberate_collide"),
                         Leg(approach, "back_off")]
                elapsed += (d + 2 * d2) / speed + 1.0
                length += d + 2 * d2
                pos = approach
                since = 0.0
                continue
        for attempt in range(60):
            h = heading + rng.normal(0.0, 0.6 if attempt < 30 else 2.0)
            dist = rng.uniform(1.5, 5.0)
            nxt = (pos[0] + dist * math.cos(h), pos[1] + dist * math.sin(h))
            if allowed(nxt) and _spot_clear(world, nxt, dims, margin) and \
                    _segment_clear(world, pos, nxt, dims, margin):
                legs.append(Leg((float(nxt[0]), float(nxt[1])), "drive"))
                heading = h
                elapsed += dist / speed + 0.1
                since += dist / speed
                length += dist
                pos = nxt
                break
        else:
            heading += math.pi
            since += 1.0
            elapsed += 1.0
    return OperatorScript((float(start[0]), float(start[1]), 0.0), legs, speed)


def _grow(region, by):
    x0, y0, x1, y1 = region
    return (x0 - by, y0 - by, x1 + by, y1 + by)


def _plan_collision(world, pos, rigid, rng, dims, margin, allowed):
    cand = [r for r in rigid if 1.0 < math.hypot(r[0] - pos[0], r[1] - pos[1]) < 8.0]
    rng.shuffle(cand)
    for cx, cy, rad in cand[:6]:
        for _ in range(8):
            a = rng.uniform(-math.pi, math.pi)
            gap = rad + dims[0] / 2 + 1.2
            ap = (cx + gap * math.cos(a), cy + gap * math.sin(a))
            if not (allowed(ap) and _spot_clear(world, ap, dims, margin)
                    and _segment_clear(world, pos, ap, dims, margin)):
                continue
            # approach corridor must be free up to the final half meter
            toward = (cx - ap[0], cy - ap[1])
            n = math.hypot(*toward)
            stop = (ap[0] + toward[0] / n * (n - rad - dims[0] / 2 - 0.5),
                    ap[1] + toward[1] / n * (n - rad - dims[0] / 2 - 0.5))
            if _segment_clear(world, ap, stop, dims, 0.05):
                return (float(ap[0]), float(ap[1])), (float(cx), float(cy))
    return None


def survey_map(world: World, region, spacing=2.0, pattern: RayPattern | None = None, seed=0,
               resolution=0.1, dims=ROBOT_DIMS) -> VoxelMap:
    """Static survey scans on a grid of free positions inside ``region``."""
    x0, y0, x1, y1 = region
    rng = np.random.default_rng(seed)
    vm = VoxelMap(resolution)
    xs = np.arange(x0 + spacing / 2, x1, spacing)
    ys = np.arange(y0 + spacing / 2, y1, spacing)
    t = 0.0
    for yy in ys:
        for xx in xs:
            if footprint_hits(world, xx, yy, 0.0, dims, 0.1):
                continue
            z = float(world.ground.height(xx, yy)) + SENSOR_HEIGHT
            origin = (float(xx), float(yy), z)
            vm.integrate_scan(origin, simulate_scan(world, (*origin, 0.0), pattern, rng), t)
            t += 1.0
    return vm


def evaluation_labels(world: World, table, region=None, occupied_only=True):
    """Rows and truth labels (1 TR / 0 NTR) of a map usable for evaluation."""
    mask = region_mask(table.keys, table.resolution, region)
    if occupied_only:
        mask &= table.n > 0
    rows = np.flatnonzero(mask)
    gt = ground_truth(world, table.keys[rows], table.resolution)
    keep = gt >= 0
    return rows[keep], gt[keep].astype(np.int64)


def drive_map(world: World, region, seed=0, duration=180.0, speed=0.5, scan_rate=2.0,
              resolution=0.1) -> VoxelMap:
    """Map built by a collision-free drive confined to ``region``.

    Produces voxel statistics comparable to those seen online, unlike the
    static ``survey_map``.
    """
    script = plan_script(world, seed=seed, duration=duration, speed=speed, region=region,
                         collide_every=float("inf"))
    ep = run_episode(world, script, scan_rate=scan_rate, seed=seed)
    vm = VoxelMap(resolution)
    for t, origin, block in ep.scans:
        vm.integrate_scan(origin, block, t)
    return vm
