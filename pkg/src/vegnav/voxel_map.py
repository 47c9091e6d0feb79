"""Sparse probabilistic voxel map.

Each voxel carries sufficient statistics for several per-voxel distributions
(occupancy log-odds, an NDT Gaussian over endpoint locations, hit/miss
permeability counts, intensity moments and the number of second returns).
Storage is columnar: a hash index maps packed voxel keys to rows of numpy
arrays, so whole scans are integrated with vectorized operations.

Endpoint sums are stored relative to the voxel center. This keeps the
one-pass covariance numerically exact far away from the map origin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
N_FEATURES = 16

LOG_ODDS_CLAMP = 10.0
DEFAULT_RESOLUTION = 0.1
DEFAULT_P_HIT = 0.7
DEFAULT_P_MISS = 0.4
DEFAULT_I_MAX = 255.0

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1

# little-endian float32 x,y,z,intensity + uint8 return index (0 first, 1 second)
RETURN_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("ret", "u1")]
)

# upper-triangle order of the covariance entries: xx, xy, xz, yy, yz, zz
_TRIU = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def logit(p):
    return np.log(p / (1.0 - p))


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def pack_keys(keys) -> np.ndarray:
    """Pack (N, 3) integer voxel indices into sortable int64 scalars."""
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3) + _KEY_OFFSET
    return (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]


def unpack_keys(packed) -> np.ndarray:
    p = np.asarray(packed, dtype=np.int64).reshape(-1)
    out = np.empty((p.size, 3), dtype=np.int64)
    out[:, 0] = (p >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (p >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = p & _KEY_MASK
    return out - _KEY_OFFSET


def point_to_key(points, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / resolution).astype(np.int64)


def key_centers(keys, resolution: float) -> np.ndarray:
    return (np.asarray(keys, dtype=float) + 0.5) * resolution


@dataclass(frozen=True)
class LidarReturn:
    endpoint: tuple[float, float, float]
    intensity: float = 0.0
    is_second_return: bool = False


def returns_to_array(returns) -> np.ndarray:
    """Coerce a list of LidarReturn (or an existing block) to RETURN_DTYPE."""
    if isinstance(returns, np.ndarray) and returns.dtype == RETURN_DTYPE:
        return returns
    out = np.zeros(len(returns), dtype=RETURN_DTYPE)
    for i, r in enumerate(returns):
        out[i] = (*r.endpoint, r.intensity, 1 if r.is_second_return else 0)
    return out


# ---------------------------------------------------------------------------
# ray traversal


def _raycast_batch(origins: np.ndarray, ends: np.ndarray, resolution: float):
    """Grid traversal of many segments at once.

    Every axis-boundary crossing of every ray is enumerated, the crossings are
    sorted by ray parameter and the cell sequence is recovered with a
    cumulative sum over the steps. The number of crossings per axis comes from
    integer cell differences, so each sequence ends exactly at the endpoint
    cell whatever the rounding of the crossing parameters.

    Returns:
        (cells, ray_index): traversed cells (M, 3), endpoint cell excluded, and
        the ray each cell belongs to. Cells of one ray are contiguous and in
        traversal order.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    ends = np.asarray(ends, dtype=float).reshape(-1, 3)
    n_rays = origins.shape[0]
    start = point_to_key(origins, resolution)
    stop = point_to_key(ends, resolution)
    delta = stop - start
    n_axis = np.abs(delta)
    n_steps = n_axis.sum(axis=1)
    if n_rays == 0 or n_steps.sum() == 0:
        return np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.int64)

    direction = ends - origins
    ray_parts, t_parts, axis_parts, step_parts = [], [], [], []
    for a in range(3):
        counts = n_axis[:, a]
        total = int(counts.sum())
        if total == 0:
            continue
        ray = np.repeat(np.arange(n_rays), counts)
        # 1-based crossing index within the ray
        first = np.cumsum(counts) - counts
        m = np.arange(total) - np.repeat(first, counts) + 1
        sign = np.sign(delta[ray, a])
        boundary = np.where(sign > 0, start[ray, a] + m, start[ray, a] - m + 1) * resolution
        t = (boundary - origins[ray, a]) / direction[ray, a]
        ray_parts.append(ray)
        t_parts.append(t)
        axis_parts.append(np.full(total, a, dtype=np.int64))
        step_parts.append(sign.astype(np.int64))

    ray = np.concatenate(ray_parts)
    t = np.concatenate(t_parts)
    axis = np.concatenate(axis_parts)
    step = np.concatenate(step_parts)
    order = np.lexsort((axis, t, ray))
    ray, axis, step = ray[order], axis[order], step[order]

    inc = np.zeros((ray.size, 3), dtype=np.int64)
    inc[np.arange(ray.size), axis] = step
    # start cell of each ray followed by each step; the last cell (endpoint) is dropped
    offsets = np.cumsum(n_steps) - n_steps
    csum = np.cumsum(inc, axis=0)
    base = np.zeros((n_rays, 3), dtype=np.int64)
    nz = n_steps > 0
    prev = offsets[nz] - 1
    base[nz] = np.where(prev[:, None] >= 0, csum[np.maximum(prev, 0)], 0)
    # cell after j steps = start + csum[j] - base; before any step = start
    shifted = np.vstack([np.zeros((1, 3), dtype=np.int64), csum[:-1]])
    cells = start[ray] + shifted - base[ray]
    return cells, ray


def raycast_voxels(origin, endpoint, resolution: float) -> list[tuple[int, int, int]]:
    """Cells traversed from the origin cell up to (excluding) the endpoint cell.

    >>> raycast_voxels((0.05, 0.05, 0.05), (0.35, 0.05, 0.05), 0.1)
    [(0, 0, 0), (1, 0, 0), (2, 0, 0)]
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    cells, _ = _raycast_batch(origin, endpoint, resolution)
    return [tuple(int(v) for v in c) for c in cells]


# ---------------------------------------------------------------------------
# columnar voxel records


class VoxelTable:
    """Column store of voxel records (a map, a snapshot, a batch or a submap).

    ``p_ntr`` is only populated once collision labels have been attached.
    """

    COLUMNS = ("keys", "lo", "n", "sp", "sppt", "nh", "nm", "si", "si2", "nmr", "t")

    def __init__(self, resolution, keys, lo, n, sp, sppt, nh, nm, si, si2, nmr, t, p_ntr=None):
        self.resolution = float(resolution)
        self.keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        self.lo = np.asarray(lo, dtype=float)
        self.n = np.asarray(n, dtype=np.int64)
        self.sp = np.asarray(sp, dtype=float).reshape(-1, 3)
        self.sppt = np.asarray(sppt, dtype=float).reshape(-1, 6)
        self.nh = np.asarray(nh, dtype=np.int64)
        self.nm = np.asarray(nm, dtype=np.int64)
        self.si = np.asarray(si, dtype=float)
        self.si2 = np.asarray(si2, dtype=float)
        self.nmr = np.asarray(nmr, dtype=np.int64)
        self.t = np.asarray(t, dtype=float)
        self.p_ntr = None if p_ntr is None else np.asarray(p_ntr, dtype=float)

    @classmethod
    def empty(cls, resolution, with_labels=False):
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(resolution, np.zeros((0, 3), np.int64), z, zi, np.zeros((0, 3)),
                   np.zeros((0, 6)), zi, zi, z, z, zi, z, z if with_labels else None)

    def __len__(self):
        return self.keys.shape[0]

    def packed(self) -> np.ndarray:
        return pack_keys(self.keys)

    def take(self, idx) -> "VoxelTable":
        cols = [getattr(self, c)[idx] for c in self.COLUMNS]
        p = None if self.p_ntr is None else self.p_ntr[idx]
        return VoxelTable(self.resolution, *cols, p_ntr=p)

    def copy(self) -> "VoxelTable":
        return self.take(np.arange(len(self)))

    @staticmethod
    def concat(tables: Sequence["VoxelTable"]) -> "VoxelTable":
        if not tables:
            raise ValueError("nothing to concatenate")
        res = tables[0].resolution
        cols = [np.concatenate([getattr(tb, c) for tb in tables]) for c in VoxelTable.COLUMNS]
        if all(tb.p_ntr is not None for tb in tables):
            p = np.concatenate([tb.p_ntr for tb in tables])
        else:
            p = None
        return VoxelTable(res, *cols, p_ntr=p)

    def centers(self) -> np.ndarray:
        return key_centers(self.keys, self.resolution)

    def means(self) -> np.ndarray:
        """NDT mean per voxel; the voxel center where there are no endpoints."""
        n = np.maximum(self.n, 1)[:, None]
        return self.centers() + self.sp / n

    def covariances(self) -> np.ndarray:
        """Population covariance per voxel as an (N, 3, 3) array."""
        n = np.maximum(self.n, 1)[:, None]
        mu = self.sp / n
        m2 = self.sppt / n
        cov = np.zeros((len(self), 3, 3))
        for c, (a, b) in enumerate(_TRIU):
            v = m2[:, c] - mu[:, a] * mu[:, b]
            cov[:, a, b] = v
            cov[:, b, a] = v
        return cov

    def intensity_moments(self):
        n = np.maximum(self.n, 1)
        mu = self.si / n
        var = np.maximum(self.si2 / n - mu * mu, 0.0)
        return mu, np.sqrt(var)

    def features(self, i_max: float = DEFAULT_I_MAX) -> np.ndarray:
        """Fixed-width (N, 16) feature matrix, see ``feature_vector``."""
        res = self.resolution
        n = np.maximum(self.n, 1)[:, None]
        mu_off = self.sp / n
        m2 = self.sppt / n
        out = np.zeros((len(self), N_FEATURES))
        out[:, 0] = logistic(self.lo)
        out[:, 1] = np.log1p(self.n)
        out[:, 2:5] = mu_off / res
        for c, (a, b) in enumerate(_TRIU):
            out[:, 5 + c] = (m2[:, c] - mu_off[:, a] * mu_off[:, b]) / res**2
        tot = self.nh + self.nm
        out[:, 11] = np.where(tot > 0, self.nh / np.maximum(tot, 1), 0.0)
        out[:, 12] = np.log1p(self.nm)
        mu_i, sd_i = self.intensity_moments()
        out[:, 13] = mu_i / i_max
        out[:, 14] = sd_i / i_max
        out[:, 15] = np.log1p(self.nmr)
        return out

    # JSON Lines --------------------------------------------------------------

    def write_jsonl(self, path, extra_header=None):
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps(self._header(extra_header)) + "\n")
            for line in self.iter_json_lines():
                fh.write(line + "\n")

    def _header(self, extra=None):
        head = {"format_version": FORMAT_VERSION, "resolution": self.resolution,
                "stats_frame": "voxel_center"}
        if extra:
            head.update(extra)
        return head

    def iter_json_lines(self):
        for r in range(len(self)):
            rec = {
                "key": [int(v) for v in self.keys[r]],
                "lo": float(self.lo[r]),
                "n": int(self.n[r]),
                "sp": [float(v) for v in self.sp[r]],
                "sppt": [float(v) for v in self.sppt[r]],
                "nh": int(self.nh[r]),
                "nm": int(self.nm[r]),
                "si": float(self.si[r]),
                "si2": float(self.si2[r]),
                "nmr": int(self.nmr[r]),
                "t": float(self.t[r]),
            }
            if self.p_ntr is not None:
                rec["p_ntr"] = float(self.p_ntr[r])
            yield json.dumps(rec)

    @classmethod
    def from_json_lines(cls, lines: Iterable[str], resolution=None):
        lines = iter(lines)
        if resolution is None:
            head = json.loads(next(lines))
            if head.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported voxel format {head.get('format_version')}")
            resolution = head["resolution"]
        recs = [json.loads(s) for s in lines if s.strip()]
        if not recs:
            return cls.empty(resolution)
        has_p = all("p_ntr" in r for r in recs)
        return cls(
            resolution,
            [r["key"] for r in recs], [r["lo"] for r in recs], [r["n"] for r in recs],
            [r["sp"] for r in recs], [r["sppt"] for r in recs], [r["nh"] for r in recs],
            [r["nm"] for r in recs], [r["si"] for r in recs], [r["si2"] for r in recs],
            [r["nmr"] for r in recs], [r["t"] for r in recs],
            p_ntr=[r["p_ntr"] for r in recs] if has_p else None,
        )

    @classmethod
    def read_jsonl(cls, path):
        with Path(path).open() as fh:
            return cls.from_json_lines(fh)


@dataclass
class Voxel:
    """Read-only view of one voxel's statistics.

    ``sum_p`` and ``sum_ppT`` are taken relative to the voxel center.
    """

    key: tuple[int, int, int]
    log_odds_occ: float
    n_endpoints: int
    sum_p: np.ndarray
    sum_ppT: np.ndarray
    n_hit: int
    n_miss: int
    sum_i: float
    sum_i2: float
    n_second_returns: int
    last_update: float
    resolution: float

    @property
    def p_occ(self):
        return float(logistic(self.log_odds_occ))

    @property
    def mean(self):
        c = key_centers(self.key, self.resolution)
        if self.n_endpoints == 0:
            return c
        return c + self.sum_p / self.n_endpoints

    @property
    def covariance(self):
        if self.n_endpoints == 0:
            return np.zeros((3, 3))
        mu = self.sum_p / self.n_endpoints
        return self.sum_ppT / self.n_endpoints - np.outer(mu, mu)

    @property
    def intensity_mean(self):
        return self.sum_i / self.n_endpoints if self.n_endpoints else 0.0

    @property
    def intensity_std(self):
        if not self.n_endpoints:
            return 0.0
        mu = self.sum_i / self.n_endpoints
        return math.sqrt(max(self.sum_i2 / self.n_endpoints - mu * mu, 0.0))


# ---------------------------------------------------------------------------
# live map


class VoxelMap:
    """Mutable sparse voxel map.

    Args:
        resolution: voxel edge length in meters.
        p_hit: occupancy probability applied at ray endpoints.
        p_miss: occupancy probability applied to traversed voxels.
        i_max: intensity normalization constant used by the features.
    """

    def __init__(self, resolution=DEFAULT_RESOLUTION, p_hit=DEFAULT_P_HIT,
                 p_miss=DEFAULT_P_MISS, i_max=DEFAULT_I_MAX):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.l_hit = float(logit(p_hit))
        self.l_miss = float(logit(p_miss))
        self.i_max = float(i_max)
        self._index: dict[int, int] = {}
        self._size = 0
        self._alloc(1024)

    def _alloc(self, cap):
        def grow(name, shape, dtype):
            new = np.zeros(shape, dtype=dtype)
            old = getattr(self, name, None)
            if old is not None:
                new[: self._size] = old[: self._size]
            setattr(self, name, new)

        grow("_keys", (cap, 3), np.int64)
        grow("_lo", cap, float)
        grow("_n", cap, np.int64)
        grow("_sp", (cap, 3), float)
        grow("_sppt", (cap, 6), float)
        grow("_nh", cap, np.int64)
        grow("_nm", cap, np.int64)
        grow("_si", cap, float)
        grow("_si2", cap, float)
        grow("_nmr", cap, np.int64)
        grow("_t", cap, float)
        self._cap = cap

    def __len__(self):
        return self._size

    def __contains__(self, key):
        return int(pack_keys([key])[0]) in self._index

    def _rows(self, packed: np.ndarray, keys: np.ndarray) -> np.ndarray:
        """Row of every key, allocating rows for unseen keys."""
        index = self._index
        rows = np.fromiter((index.get(p, -1) for p in packed.tolist()),
                           dtype=np.int64, count=packed.size)
        new = np.flatnonzero(rows < 0)
        if new.size:
            need = self._size + new.size
            if need > self._cap:
                self._alloc(max(need, 2 * self._cap))
            ids = np.arange(self._size, need)
            rows[new] = ids
            self._keys[ids] = keys[new]
            index.update(zip(packed[new].tolist(), ids.tolist()))
            self._size = need
        return rows

    def integrate_scan(self, sensor_origin, returns, t: float) -> int:
        """Fuse one scan into the map.

        Occupancy and counts are aggregated per voxel over the whole scan before
        being applied, and endpoints are accumulated in a canonical order, so
        the result does not depend on the order of ``returns``.

        Returns:
            Number of returns skipped because they were not finite.
        """
        block = returns_to_array(returns)
        origin = np.asarray(sensor_origin, dtype=float).reshape(3)
        pts = np.stack([block["x"], block["y"], block["z"]], axis=1).astype(float)
        inten = block["intensity"].astype(float)
        second = block["ret"].astype(np.int64) > 0
        ok = np.isfinite(pts).all(axis=1) & np.isfinite(inten)
        skipped = int((~ok).sum())
        pts, inten, second = pts[ok], inten[ok], second[ok]
        if pts.shape[0] == 0:
            return skipped

        res = self.resolution
        # endpoints, canonical order
        order = np.lexsort((second, inten, pts[:, 2], pts[:, 1], pts[:, 0]))
        pts, inten, second = pts[order], inten[order], second[order]
        hit_keys = point_to_key(pts, res)
        hit_packed = pack_keys(hit_keys)
        uh, first, inv = np.unique(hit_packed, return_index=True, return_inverse=True)
        off = pts - key_centers(hit_keys, res)
        m = uh.size
        cnt = np.bincount(inv, minlength=m)
        sp = np.stack([np.bincount(inv, off[:, a], m) for a in range(3)], axis=1)
        sppt = np.stack([np.bincount(inv, off[:, a] * off[:, b], m) for a, b in _TRIU], axis=1)
        si = np.bincount(inv, inten, m)
        si2 = np.bincount(inv, inten * inten, m)
        nmr = np.bincount(inv, second.astype(float), m).astype(np.int64)

        # traversed cells
        cells, _ = _raycast_batch(np.broadcast_to(origin, pts.shape), pts, res)
        miss_packed = pack_keys(cells)
        um, mfirst, mcnt = np.unique(miss_packed, return_index=True, return_counts=True)

        rows_h = self._rows(uh, hit_keys[first])
        rows_m = self._rows(um, cells[mfirst])

        delta = np.zeros(self._size)
        np.add.at(delta, rows_h, cnt * self.l_hit)
        np.add.at(delta, rows_m, mcnt * self.l_miss)
        touched = np.union1d(rows_h, rows_m)
        self._lo[touched] = np.clip(self._lo[touched] + delta[touched], -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
        self._n[rows_h] += cnt
        self._nh[rows_h] += cnt
        self._sp[rows_h] += sp
        self._sppt[rows_h] += sppt
        self._si[rows_h] += si
        self._si2[rows_h] += si2
        self._nmr[rows_h] += nmr
        self._nm[rows_m] += mcnt
        self._t[touched] = t
        return skipped

    def voxel(self, key) -> Voxel | None:
        r = self._index.get(int(pack_keys([key])[0]))
        if r is None:
            return None
        ppt = np.zeros((3, 3))
        for c, (a, b) in enumerate(_TRIU):
            ppt[a, b] = ppt[b, a] = self._sppt[r, c]
        return Voxel(
            key=tuple(int(v) for v in self._keys[r]), log_odds_occ=float(self._lo[r]),
            n_endpoints=int(self._n[r]), sum_p=self._sp[r].copy(), sum_ppT=ppt,
            n_hit=int(self._nh[r]), n_miss=int(self._nm[r]), sum_i=float(self._si[r]),
            sum_i2=float(self._si2[r]), n_second_returns=int(self._nmr[r]),
            last_update=float(self._t[r]), resolution=self.resolution,
        )

    def feature_vector(self, key) -> np.ndarray | None:
        """16-value feature vector of a voxel, or None if it was never observed.

        Order: p_occ, log1p(n_endpoints), mean offset from the voxel center
        (x, y, z, voxel units), covariance xx, xy, xz, yy, yz, zz (voxel units
        squared), hit ratio, log1p(n_miss), intensity mean and std over
        ``i_max``, log1p(n_second_returns).
        """
        r = self._index.get(int(pack_keys([key])[0]))
        if r is None or (self._n[r] == 0 and self._nm[r] == 0):
            return None
        return self.to_table(np.array([r])).features(self.i_max)[0]

    def to_table(self, rows=None) -> VoxelTable:
        if rows is None:
            rows = np.arange(self._size)
        return VoxelTable(
            self.resolution, self._keys[rows], self._lo[rows], self._n[rows], self._sp[rows],
            self._sppt[rows], self._nh[rows], self._nm[rows], self._si[rows], self._si2[rows],
            self._nmr[rows], self._t[rows],
        )

    def local_snapshot(self, center, r_max: float, z_min: float, z_max: float) -> VoxelTable:
        """Copy of all voxels whose center lies in the vertical cylinder."""
        if r_max <= 0 or z_min >= z_max:
            raise ValueError("need r_max > 0 and z_min < z_max")
        rows = cylinder_mask(self._keys[: self._size], self.resolution, center, r_max, z_min, z_max)
        return self.to_table(np.flatnonzero(rows))

    def save_jsonl(self, path):
        self.to_table().write_jsonl(path)

    @classmethod
    def from_table(cls, table: VoxelTable, **kwargs) -> "VoxelMap":
        vm = cls(resolution=table.resolution, **kwargs)
        packed = table.packed()
        rows = vm._rows(packed, table.keys)
        for name in VoxelTable.COLUMNS[1:]:
            getattr(vm, "_" + name)[rows] = getattr(table, name)
        return vm

    @classmethod
    def load_jsonl(cls, path, **kwargs) -> "VoxelMap":
        return cls.from_table(VoxelTable.read_jsonl(path), **kwargs)


def cylinder_mask(keys, resolution, center, r_max, z_min, z_max) -> np.ndarray:
    """Voxel centers inside the vertical cylinder around ``center`` (inclusive)."""
    c = key_centers(keys, resolution)
    center = np.asarray(center, dtype=float)
    d2 = (c[:, 0] - center[0]) ** 2 + (c[:, 1] - center[1]) ** 2
    dz = c[:, 2] - center[2]
    eps = 1e-9
    return (d2 <= r_max * r_max + eps) & (dz >= z_min - eps) & (dz <= z_max + eps)
