"""A small per-point segmentation network with hand-written backprop.

Architecture (rectifier after every hidden layer)::

    x (3+D_f) -> enc1 (h) -> enc2 (h) = e
    g_i = max_{j in knn(i)} e_j                      (channel-wise)
    [e, g] (2h) -> agg (h) -> head (C) = logits

Gradients are exact; the max routes to the first arg-max neighbour.
Optimisation is SGD with classical momentum.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import softmax
from .pointcloud import PointCloud

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Tape",
    "TrainState",
    "StaleTapeError",
    "TrainingError",
    "init_params",
    "standardize",
    "Normalizer",
    "forward",
    "backward",
    "probabilities",
    "sgd_step",
    "init_state",
    "save_checkpoint",
    "load_checkpoint",
    "PARAM_NAMES",
]

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")
CKPT_MAGIC = b"RACCKPT1"

probabilities = softmax


class StaleTapeError(RuntimeError):
    """Backward called with a tape whose parameters were already updated."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int = 6
    hidden: int = 64
    n_classes: int = 6
    k: int = 16

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        return {
            "W1": (self.in_dim, h), "b1": (h,),
            "W2": (h, h), "b2": (h,),
            "W3": (2 * h, h), "b3": (h,),
            "W4": (h, self.n_classes), "b4": (self.n_classes,),
        }


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    arrays: dict
    retired: bool = field(default=False, repr=False)

    def __post_init__(self):
        shapes = self.config.shapes()
        for name in PARAM_NAMES:
            a = self.arrays.get(name)
            if a is None or a.shape != shapes[name]:
                got = None if a is None else a.shape
                raise ValueError(f"parameter {name}: expected shape {shapes[name]}, got {got}")
            if not np.isfinite(a).all():
                raise ValueError(f"parameter {name} has non-finite values")

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in PARAM_NAMES])


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.shapes().items():
        if name.startswith("W"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(config, arrays)


@dataclass(frozen=True)
class Normalizer:
    """Shifts a reference cloud to (mean x, mean y, lowest z) and divides by its extent.

    Anchoring z at the lowest point keeps "height above the floor" as a
    feature that survives the shift.
    """

    center: np.ndarray
    scale: float

    @classmethod
    def fit(cls, cloud: PointCloud) -> "Normalizer":
        loc = cloud.locations
        extent = float(np.max(loc.max(axis=0) - loc.min(axis=0)))
        center = loc.mean(axis=0)
        center[2] = loc[:, 2].min()
        return cls(center, extent if extent > 0 else 1.0)

    def __call__(self, cloud: PointCloud) -> PointCloud:
        return cloud.replace(locations=(cloud.locations - self.center) / self.scale)


def standardize(cloud: PointCloud, reference: PointCloud | None = None) -> PointCloud:
    """Standardize ``cloud`` with statistics of ``reference`` (default: itself).

    Augmented views should be standardized with the original cloud as
    reference, otherwise re-centering would undo the augmentation.
    """
    return Normalizer.fit(reference if reference is not None else cloud)(cloud)


@dataclass(eq=False)
class Tape:
    params: ModelParams
    x: np.ndarray
    neighbors: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    arg: np.ndarray
    cat: np.ndarray
    a3: np.ndarray


def _relu(x):
    return np.maximum(x, 0.0)


def forward(params: ModelParams, cloud: PointCloud | np.ndarray, neighbors: np.ndarray):
    """Logits (N x C) and a tape for :func:`backward`."""
    x = cloud.as_matrix() if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    cfg = params.config
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ValueError(f"input has shape {x.shape}, model expects N x {cfg.in_dim}")
    nbr = np.asarray(neighbors)
    if nbr.ndim != 2 or nbr.shape[0] != x.shape[0]:
        raise ValueError(f"neighbors shape {nbr.shape} does not match {x.shape[0]} points")
    if nbr.size and (nbr.min() < 0 or nbr.max() >= x.shape[0]):
        raise ValueError("neighbor index out of range")

    a1 = _relu(x @ params["W1"] + params["b1"])
    a2 = _relu(a1 @ params["W2"] + params["b2"])
    # running channel-wise max over the k neighbours; strict ">" keeps the first max
    cols = np.ascontiguousarray(nbr.T)
    pooled = a2[cols[0]]
    arg = np.zeros(a2.shape, dtype=np.int16 if cols.shape[0] > 127 else np.int8)
    for j in range(1, cols.shape[0]):
        cand = a2[cols[j]]
        np.putmask(arg, cand > pooled, j)
        np.maximum(pooled, cand, out=pooled)
    cat = np.concatenate([a2, pooled], axis=1)
    a3 = _relu(cat @ params["W3"] + params["b3"])
    logits = a3 @ params["W4"] + params["b4"]
    return logits, Tape(params, x, nbr, a1, a2, arg, cat, a3)


def backward(tape: Tape, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_logits * logits)`` w.r.t. every parameter."""
    if tape.params.retired:
        raise StaleTapeError("tape refers to parameters that have since been updated")
    p = tape.params
    g = np.asarray(grad_logits, dtype=np.float64)
    n, h = tape.a2.shape
    if g.shape != (n, p.config.n_classes):
        raise ValueError(f"grad_logits shape {g.shape} != logits {(n, p.config.n_classes)}")

    grads = {}
    grads["W4"] = tape.a3.T @ g
    grads["b4"] = g.sum(axis=0)
    d3 = (g @ p["W4"].T) * (tape.a3 > 0)
    grads["W3"] = tape.cat.T @ d3
    grads["b3"] = d3.sum(axis=0)
    dcat = d3 @ p["W3"].T
    d_e = dcat[:, :h].copy()
    d_pool = dcat[:, h:]
    # route pooled gradient to the winning neighbour of each channel
    src = np.take_along_axis(tape.neighbors, tape.arg.astype(np.intp), axis=1)   # N x h
    flat = (src * h + np.arange(h)[None, :]).ravel()
    d_e += np.bincount(flat, weights=d_pool.ravel(), minlength=n * h).reshape(n, h)

    d2 = d_e * (tape.a2 > 0)
    grads["W2"] = tape.a1.T @ d2
    grads["b2"] = d2.sum(axis=0)
    d1 = (d2 @ p["W2"].T) * (tape.a1 > 0)
    grads["W1"] = tape.x.T @ d1
    grads["b1"] = d1.sum(axis=0)
    return grads


@dataclass(eq=False)
class TrainState:
    params: ModelParams
    momentum_buffers: dict
    step: int = 0
    lr: float = 0.01
    momentum: float = 0.9


def init_state(config: ModelConfig, seed: int = 0, lr: float = 0.01, momentum: float = 0.9) -> TrainState:
    params = init_params(config, seed)
    bufs = {n: np.zeros_like(params[n]) for n in PARAM_NAMES}
    return TrainState(params, bufs, 0, lr, momentum)


def sgd_step(state: TrainState, grads: dict) -> TrainState:
    """``buf <- mu*buf + g;  w <- w - lr*buf``.  Retires the old parameters."""
    for name in PARAM_NAMES:
        g = grads[name]
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {state.params[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name} at step {state.step}")
    bufs, arrays = {}, {}
    for name in PARAM_NAMES:
        bufs[name] = state.momentum * state.momentum_buffers[name] + grads[name]
        arrays[name] = state.params[name] - state.lr * bufs[name]
    state.params.retired = True
    new_params = ModelParams(state.params.config, arrays)
    return TrainState(new_params, bufs, state.step + 1, state.lr, state.momentum)


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 in_dim/hidden/n_classes/k, then f64 blob in PARAM_NAMES order
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<QQQQ", cfg.in_dim, cfg.hidden, cfg.n_classes, cfg.k))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelParams:
    blob = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 32
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC or len(blob) < head:
        raise ValueError(f"{path}: not a checkpoint file")
    cfg = ModelConfig(*struct.unpack("<QQQQ", blob[len(CKPT_MAGIC) : head]))
    if expected is not None and cfg != expected:
        raise ValueError(f"checkpoint shape {cfg} does not match configuration {expected}")
    shapes = cfg.shapes()
    size = sum(int(np.prod(shapes[n])) for n in PARAM_NAMES)
    if len(blob) != head + 8 * size:
        raise ValueError(f"{path}: truncated or oversized parameter blob")
    arrays, off = {}, head
    for name in PARAM_NAMES:
        cnt = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=cnt, offset=off).reshape(shapes[name]).copy()
        off += 8 * cnt
    return ModelParams(cfg, arrays)
