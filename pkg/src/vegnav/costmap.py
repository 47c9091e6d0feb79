"""3D traversability map to 2D planner costmap.

Three steps: pick the support (ground) voxel of every map column and average
the traversability of the voxels just above it, fill unobserved cells with a
two-stage kernel average (virtual surface), then map mean traversability to a
cost with an exponential decay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .te_model import TEMap

EMPTY, OBSERVED, VIRTUAL = 0, 1, 2
CLS_NAMES = {EMPTY: "empty", OBSERVED: "observed", VIRTUAL: "virtual"}

N_WINDOW = 10
Z_LIMIT = 0.5
KERNEL = 5
N_ADJ = 5
LAMBDA_TAU = 0.3


@dataclass
class SurfaceGrid:
    """Support surface over cells (u, v) = (i - i0, j - j0)."""

    resolution: float
    i0: int
    j0: int
    p_bar: np.ndarray
    z: np.ndarray
    cls: np.ndarray

    @property
    def shape(self):
        return self.cls.shape

    def copy(self) -> "SurfaceGrid":
        return SurfaceGrid(self.resolution, self.i0, self.j0, self.p_bar.copy(), self.z.copy(),
                           self.cls.copy())

    @classmethod
    def from_arrays(cls, p_bar, z=None, resolution=0.1, i0=0, j0=0) -> "SurfaceGrid":
        """Grid from a p_bar array with NaN marking empty cells."""
        p = np.asarray(p_bar, dtype=float)
        z = np.zeros_like(p) if z is None else np.asarray(z, dtype=float)
        c = np.where(np.isnan(p), EMPTY, OBSERVED).astype(np.int8)
        return cls(resolution, i0, j0, p.copy(), np.where(c == EMPTY, np.nan, z), c)


def nearest_pose_reference(poses):
    """Reference height per column: z of the nearest trajectory pose (xy)."""
    poses = np.asarray(poses, dtype=float)
    xyz = poses[:, 1:4] if poses.shape[1] > 3 else poses
    tree = cKDTree(xyz[:, :2])

    def ref(x, y):
        _, idx = tree.query(np.stack([np.ravel(x), np.ravel(y)], axis=1))
        return xyz[idx, 2].reshape(np.shape(x))

    return ref


def support_surface(te_map: TEMap, reference_z, z_limit=Z_LIMIT, n_window=N_WINDOW) -> SurfaceGrid:
    """Ground voxel and mean traversability per column.

    Args:
        te_map: predictions with per-voxel observation flags.
        reference_z: scalar, or callable (x, y) -> z giving the robot height
            each column is compared against.
    """
    res = te_map.resolution
    keys = te_map.keys
    if len(keys) == 0:
        return SurfaceGrid(res, 0, 0, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0), np.int8))
    i0, j0 = keys[:, 0].min(), keys[:, 1].min()
    nx = int(keys[:, 0].max() - i0 + 1)
    ny = int(keys[:, 1].max() - j0 + 1)
    p_bar = np.full((nx, ny), np.nan)
    zg = np.full((nx, ny), np.nan)
    cls = np.zeros((nx, ny), dtype=np.int8)

    obs = np.flatnonzero(te_map.observed)
    if obs.size == 0:
        return SurfaceGrid(res, int(i0), int(j0), p_bar, zg, cls)
    k = keys[obs]
    p = te_map.p[obs]
    u, v = k[:, 0] - i0, k[:, 1] - j0
    col = u * ny + v
    zc = (k[:, 2] + 0.5) * res
    if callable(reference_z):
        ref = reference_z((u + i0 + 0.5) * res, (v + j0 + 0.5) * res)
    else:
        ref = np.full(obs.size, float(reference_z))
    ok = zc <= ref + z_limit + 1e-9
    big = np.iinfo(np.int64).max
    ground = np.full(nx * ny, big, dtype=np.int64)
    np.minimum.at(ground, col[ok], k[ok, 2])
    kg = ground[col]
    win = (kg != big) & (k[:, 2] >= kg) & (k[:, 2] < kg + n_window)
    cnt = np.bincount(col[win], minlength=nx * ny)
    tot = np.bincount(col[win], p[win], minlength=nx * ny)
    has = cnt > 0
    flat_p = p_bar.reshape(-1)
    flat_p[has] = tot[has] / cnt[has]
    flat_z = zg.reshape(-1)
    flat_z[has] = (ground[has] + 0.5) * res
    cls.reshape(-1)[has] = OBSERVED
    return SurfaceGrid(res, int(i0), int(j0), p_bar, zg, cls)


def _window_sums(src, values, kernel):
    w = np.ones((kernel, kernel))
    cnt = ndimage.correlate(src.astype(float), w, mode="constant", cval=0.0)
    sums = [ndimage.correlate(np.where(src, v, 0.0), w, mode="constant", cval=0.0) for v in values]
    return np.rint(cnt).astype(np.int64), sums


def _fill(grid: SurfaceGrid, src, candidates, kernel, n_adj):
    cnt, (sp, sz) = _window_sums(src, (grid.p_bar, grid.z), kernel)
    fill = candidates & (grid.cls == EMPTY) & (cnt >= n_adj)
    grid.p_bar[fill] = sp[fill] / cnt[fill]
    grid.z[fill] = sz[fill] / cnt[fill]
    grid.cls[fill] = VIRTUAL
    return int(fill.sum())


def virtual_surface(grid: SurfaceGrid, kernel=KERNEL, n_adj=N_ADJ, max_iter=10000) -> SurfaceGrid:
    """Two-stage virtual surface estimation on a copy of ``grid``.

    Stage one fills empty cells from observed neighbours only, all cells
    evaluated against the input state. Stage two also accepts virtual
    neighbours and repeats until nothing changes; it is confined to the
    bounding rectangle of the observed cells.
    """
    if kernel % 2 != 1:
        raise ValueError("kernel size must be odd")
    g = grid.copy()
    if g.cls.size == 0 or not (g.cls == OBSERVED).any():
        return g
    everywhere = np.ones(g.shape, dtype=bool)
    _fill(g, g.cls == OBSERVED, everywhere, kernel, n_adj)

    ou, ov = np.nonzero(grid.cls == OBSERVED)
    inside = np.zeros(g.shape, dtype=bool)
    inside[ou.min():ou.max() + 1, ov.min():ov.max() + 1] = True
    for _ in range(max_iter):
        if _fill(g, g.cls != EMPTY, inside, kernel, n_adj) == 0:
            break
    return g


def cell_cost(p_bar, lambda_tau=LAMBDA_TAU):
    """10 exp(-6 p^2) + 1 above the threshold, infinite otherwise."""
    p = np.asarray(p_bar, dtype=float)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(p) & (p > lambda_tau)
    return np.where(ok, 10.0 * np.exp(-6.0 * np.where(ok, p, 0.0) ** 2) + 1.0, np.inf)


@dataclass
class Costmap2D:
    surface: SurfaceGrid
    cost: np.ndarray
    lambda_tau: float = LAMBDA_TAU

    @property
    def fatal(self) -> np.ndarray:
        return ~np.isfinite(self.cost)

    @property
    def origin(self):
        r = self.surface.resolution
        return self.surface.i0 * r, self.surface.j0 * r

    def write(self, path):
        """Grid text file plus a ``.json`` sidecar with the cell classes.

        Rows run along y, each listing the costs of increasing x.
        """
        path = Path(path)
        nx, ny = self.cost.shape
        ox, oy = self.origin
        lines = [f"width {nx}", f"height {ny}", f"resolution {self.surface.resolution!r}",
                 f"origin_x {ox!r}", f"origin_y {oy!r}"]
        for v in range(ny):
            lines.append(" ".join("inf" if not math.isfinite(c) else repr(float(c))
                                  for c in self.cost[:, v]))
        path.write_text("\n".join(lines) + "\n")
        side = {
            "width": nx, "height": ny, "lambda_tau": self.lambda_tau,
            "cls": [[CLS_NAMES[int(self.surface.cls[u, v])] for u in range(nx)] for v in range(ny)],
            "fatal": [[bool(self.fatal[u, v]) for u in range(nx)] for v in range(ny)],
        }
        Path(str(path) + ".json").write_text(json.dumps(side))


def read_costmap(path):
    """Parse a costmap text file into (header dict, cost array indexed [x, y])."""
    lines = Path(path).read_text().splitlines()
    head = {}
    for line in lines[:5]:
        k, v = line.split()
        head[k] = int(v) if k in ("width", "height") else float(v)
    rows = [[float(tok) for tok in line.split()] for line in lines[5:5 + head["height"]]]
    return head, np.array(rows).T


def cost_convert(grid: SurfaceGrid, lambda_tau=LAMBDA_TAU) -> Costmap2D:
    p = np.where(grid.cls == EMPTY, np.nan, grid.p_bar)
    return Costmap2D(grid, cell_cost(p, lambda_tau), lambda_tau)


def generate_costmap(te_map: TEMap, reference_z, z_limit=Z_LIMIT, n_window=N_WINDOW,
                     kernel=KERNEL, n_adj=N_ADJ, lambda_tau=LAMBDA_TAU) -> Costmap2D:
    grid = support_surface(te_map, reference_z, z_limit, n_window)
    return cost_convert(virtual_surface(grid, kernel, n_adj), lambda_tau)
