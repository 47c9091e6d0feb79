"""Per-voxel traversability classifier.

A small multilayer perceptron maps the features of a voxel's 3x3x3
neighbourhood to ``p_tau``, the belief that the voxel is traversable. It is
trained with a class-weighted binary cross entropy and Adam with decoupled
weight decay. Everything is plain numpy in float64, so runs are bit
reproducible for a given seed.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .voxel_map import DEFAULT_I_MAX, N_FEATURES, VoxelTable, key_centers, pack_keys

FORMAT_VERSION = 1
STENCIL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
N_NEIGHBOURS = len(STENCIL_OFFSETS)
STENCIL_DIM = N_NEIGHBOURS * N_FEATURES + N_NEIGHBOURS  # 459
LAYER_SIZES = (STENCIL_DIM, 64, 32, 1)
STD_FLOOR = 1e-6
P_CLAMP = 1e-7


def build_stencils(table: VoxelTable, rows=None, i_max=DEFAULT_I_MAX, features=None) -> np.ndarray:
    """Stencil inputs for ``rows`` of ``table`` using the table as context.

    Layout: 27 neighbour feature vectors (offsets in lexicographic order of
    (dx, dy, dz) over {-1, 0, 1}), then 27 presence bits. Absent neighbours
    are zero-filled.
    """
    if rows is None:
        rows = np.arange(len(table))
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((rows.size, STENCIL_DIM))
    if rows.size == 0 or len(table) == 0:
        return out
    feats = table.features(i_max) if features is None else features
    packed = table.packed()
    order = np.argsort(packed)
    sorted_p = packed[order]
    keys = table.keys[rows]
    bits0 = N_NEIGHBOURS * N_FEATURES
    for j, off in enumerate(STENCIL_OFFSETS):
        q = pack_keys(keys + off)
        pos = np.clip(np.searchsorted(sorted_p, q), 0, sorted_p.size - 1)
        present = sorted_p[pos] == q
        src = order[pos[present]]
        out[present, j * N_FEATURES:(j + 1) * N_FEATURES] = feats[src]
        out[present, bits0 + j] = 1.0
    return out


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 9e-4
    batch_size: int = 64
    epochs: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    class_weighting: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid training configuration")


OFFLINE_EPOCHS = 150
ONLINE_EPOCHS = 40


@dataclass
class TEModel:
    sizes: tuple
    weights: list
    biases: list
    seed: int = 0
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> "TEModel":
        return replace(
            self,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            mean=None if self.mean is None else self.mean.copy(),
            std=None if self.std is None else self.std.copy(),
            meta=dict(self.meta),
        )

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    def params(self) -> list:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def fit_normalization(self, X):
        X = np.asarray(X, dtype=float)
        self.mean = X.mean(axis=0)
        self.std = np.maximum(X.std(axis=0), STD_FLOOR)

    def normalize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.mean is None:
            return X
        return (X - self.mean) / self.std

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)

    # serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "arch": {"layers": list(self.sizes), "hidden": "relu", "output": "logistic",
                     "stencil": "3x3x3", "features": N_FEATURES},
            "seed": self.seed,
            "normalization": None if self.mean is None else {
                "mean": self.mean.tolist(), "std": self.std.tolist()},
            "layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TEModel":
        if obj.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {obj.get('format_version')}")
        norm = obj.get("normalization")
        return cls(
            sizes=tuple(obj["arch"]["layers"]),
            weights=[np.array(L["W"], dtype=float) for L in obj["layers"]],
            biases=[np.array(L["b"], dtype=float) for L in obj["layers"]],
            seed=obj.get("seed", 0),
            mean=None if norm is None else np.array(norm["mean"], dtype=float),
            std=None if norm is None else np.array(norm["std"], dtype=float),
            meta=obj.get("meta", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TEModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_model(seed: int = 0, sizes=LAYER_SIZES, zero=False, normalization="identity") -> TEModel:
    """Glorot-uniform weights and zero biases; ``zero=True`` zeroes everything.

    Args:
        normalization: ``"identity"`` (the features are already scaled to
            order one) or ``None`` to fit input statistics at the first
            call to ``train``.
    """
    if normalization not in ("identity", None):
        raise ValueError("normalization must be 'identity' or None")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(np.zeros_like(w) if zero else w)
        biases.append(np.zeros(fan_out))
    model = TEModel(tuple(sizes), weights, biases, seed=seed)
    if normalization == "identity":
        model.mean = np.zeros(sizes[0])
        model.std = np.ones(sizes[0])
    return model


def _forward(model: TEModel, Xn: np.ndarray):
    acts = [Xn]
    h = Xn
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(model: TEModel, X) -> np.ndarray:
    """p_tau for each row of ``X`` (raw stencil inputs)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.isfinite(X).all():
        raise ValueError("non-finite model input")
    z = _forward(model, model.normalize(X))[-1][:, 0]
    return expit(z)


def bce_loss(p, y):
    p = np.clip(np.asarray(p, dtype=float), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=float)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def class_weights(y) -> np.ndarray:
    """Inverse-frequency sample weights normalized to mean 1."""
    y = np.asarray(y)
    w = np.ones(y.size)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        return w
    for c, n in zip(classes, counts):
        w[y == c] = y.size / (classes.size * n)
    return w


def loss_and_grads(model: TEModel, Xn, y, w=None):
    """Weighted mean BCE over a batch of normalized inputs and its gradients.

    Returns:
        (loss, grads) with grads ordered like ``model.params()``.
    """
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if w is None else np.asarray(w, dtype=float)
    acts = _forward(model, Xn)
    z = acts[-1][:, 0]
    p = expit(z)
    n = y.size
    loss = float((w * bce_loss(p, y)).sum() / n)
    delta = ((w * (p - y)) / n)[:, None]
    grads = []
    for i in range(len(model.weights) - 1, -1, -1):
        a = acts[i]
        gw = a.T @ delta
        gb = delta.sum(axis=0)
        grads.append((gw, gb))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    out = []
    for gw, gb in reversed(grads):
        out.extend([gw, gb])
    return loss, out


def train(model: TEModel, X, y, config: TrainConfig = None, weights=None):
    """Train a copy of ``model`` with mini-batch AdamW.

    The input normalization is fitted on ``X`` before the first epoch unless
    the model already carries one, and is frozen afterwards.

    Args:
        X: raw stencil inputs (N, D).
        y: labels, 1 for TR and 0 for NTR.
        weights: per-sample loss weights; inverse class frequency by default.

    Returns:
        (trained model, list of per-epoch mean losses)
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("no training samples")
    if X.shape[0] != y.size:
        raise ValueError("X and y lengths differ")
    m = model.copy()
    if config.epochs == 0:
        return m, []
    if weights is None:
        weights = class_weights(y) if config.class_weighting else np.ones(y.size)
    weights = np.asarray(weights, dtype=float)
    if not m.normalized:
        m.fit_normalization(X)
    Xn = m.normalize(X)

    params = m.params()
    mom = [np.zeros_like(p) for p in params]
    vel = [np.zeros_like(p) for p in params]
    b1, b2, lr, wd, eps = config.beta1, config.beta2, config.learning_rate, config.weight_decay, config.eps
    rng = np.random.default_rng(config.seed)
    step = 0
    history = []
    n = y.size
    bs = config.batch_size
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            loss, grads = loss_and_grads(m, Xn[idx], y[idx], weights[idx])
            total += loss * idx.size
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for p, g, mo, ve in zip(params, grads, mom, vel):
                mo *= b1
                mo += (1.0 - b1) * g
                ve *= b2
                ve += (1.0 - b2) * g * g
                p *= 1.0 - lr * wd
                p -= lr * (mo / c1) / (np.sqrt(ve / c2) + eps)
        history.append(total / n)
    return m, history


@dataclass
class TEMap:
    """Predicted traversability of a set of voxels."""

    resolution: float
    keys: np.ndarray
    p: np.ndarray
    observed: np.ndarray

    def __len__(self):
        return self.p.size

    def as_dict(self) -> dict:
        return {tuple(int(v) for v in k): float(p) for k, p in zip(self.keys, self.p)}


def region_mask(keys, resolution, region) -> np.ndarray:
    """Voxel centers inside the xy rectangle (x0, y0, x1, y1), inclusive."""
    if region is None:
        return np.ones(len(keys), dtype=bool)
    x0, y0, x1, y1 = region
    c = key_centers(keys, resolution)
    return (c[:, 0] >= x0) & (c[:, 0] <= x1) & (c[:, 1] >= y0) & (c[:, 1] <= y1)


def predict_map(model: TEModel, table: VoxelTable, region=None, i_max=DEFAULT_I_MAX,
                chunk=20000) -> TEMap:
    """Predict every observed voxel of ``table`` inside ``region``."""
    rows = np.flatnonzero(region_mask(table.keys, table.resolution, region)
                          & ((table.n > 0) | (table.nm > 0)))
    feats = table.features(i_max)
    p = np.empty(rows.size)
    for s in range(0, rows.size, chunk):
        r = rows[s:s + chunk]
        p[s:s + chunk] = forward(model, build_stencils(table, r, i_max, features=feats))
    return TEMap(table.resolution, table.keys[rows], p, table.n[rows] > 0)


def samples_to_arrays(samples, i_max=DEFAULT_I_MAX):
    """Stack the stencils and labels of a list of TrainingSample."""
    xs, ys = [], []
    for s in samples:
        xs.append(build_stencils(s.submap, s.rows, i_max))
        ys.append(s.y)
    if not xs:
        return np.zeros((0, STENCIL_DIM)), np.zeros(0)
    return np.vstack(xs), np.concatenate(ys).astype(float)
