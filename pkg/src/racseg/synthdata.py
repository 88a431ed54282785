"""Procedural indoor-like scenes and one-thing-N-clicks weak annotation.

Scenes are built from surface samples of a few primitives (floor and wall
patches, boxes, spheres, cylinders, pillars) inside a room.  Each object is
one instance of one class; the per-class colour signature plus per-instance
and per-point colour noise make up the features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pointcloud import DenseLabels, PointCloud, SparseLabels, load_clicks, load_cloud, save_clicks, save_cloud

__all__ = [
    "ClassSpec",
    "DEFAULT_PALETTE",
    "SceneConfig",
    "ClickScheme",
    "AnnotationError",
    "generate_scene",
    "sample_clicks",
    "make_dataset",
    "ManifestEntry",
    "read_manifest",
    "PRIMITIVES",
]

PRIMITIVES = ("floor", "wall", "box", "sphere", "cylinder", "pillar")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    name: str
    primitive: str
    color: tuple[float, float, float]


DEFAULT_PALETTE = (
    ClassSpec("floor", "floor", (0.55, 0.445, 0.34)),
    ClassSpec("wall", "wall", (0.77, 0.76, 0.72)),
    ClassSpec("cabinet", "box", (0.63, 0.30, 0.225)),
    ClassSpec("ball", "sphere", (0.30, 0.40, 0.71)),
    ClassSpec("bin", "cylinder", (0.325, 0.60, 0.335)),
    ClassSpec("column", "pillar", (0.80, 0.74, 0.42)),
)


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 4096
    n_classes: int = 6
    object_count: tuple[int, int] = (7, 10)
    extent: float = 4.0
    height: float = 2.5
    color_noise: float = 0.06
    instance_color_noise: float = 0.08
    surface_noise: float = 0.01
    min_points_per_object: int = 24
    rng_seed: int = 0
    # explicit class per object (overrides object_count) for hand-built scenes
    object_classes: tuple[int, ...] | None = None
    palette: tuple[ClassSpec, ...] = field(default=DEFAULT_PALETTE, repr=False)

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.n_classes > len(self.palette):
            raise ValueError(f"palette defines {len(self.palette)} classes, config asks for {self.n_classes}")
        for spec in self.palette[: self.n_classes]:
            if spec.primitive not in PRIMITIVES:
                raise ValueError(f"unknown primitive {spec.primitive!r}")
        lo, hi = self.object_count
        if self.object_classes is not None:
            if len(self.object_classes) == 0:
                raise ValueError("scene needs at least one object")
            if any(not 0 <= c < self.n_classes for c in self.object_classes):
                raise ValueError("object class out of palette range")
            n_obj = len(self.object_classes)
        else:
            if lo < 1 or hi < lo:
                raise ValueError(f"infeasible object count range {self.object_count}")
            n_obj = hi
        if self.n_points < n_obj * self.min_points_per_object:
            raise ValueError(
                f"{self.n_points} points cannot hold {n_obj} objects of "
                f">= {self.min_points_per_object} points"
            )
        if self.extent <= 0 or self.height <= 0:
            raise ValueError("scene extent and height must be positive")


@dataclass(frozen=True)
class ClickScheme:
    clicks_per_thing: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.clicks_per_thing < 1:
            raise ValueError("clicks_per_thing must be >= 1")


OTOC = ClickScheme(1)
OTTC = ClickScheme(3)


# ---------------------------------------------------------------------------
# primitive surface samplers; each returns (points, area_weight) given n
# ---------------------------------------------------------------------------


def _rect(rng, n, origin, u, v):
    a, b = rng.uniform(size=(2, n))
    return origin + a[:, None] * u + b[:, None] * v


def _floor_obj(rng, cfg):
    w, d = rng.uniform(0.5 * cfg.extent, cfg.extent, size=2)
    x0 = rng.uniform(0, cfg.extent - w)
    y0 = rng.uniform(0, cfg.extent - d)
    origin = np.array([x0, y0, 0.0])
    u, v = np.array([w, 0, 0.0]), np.array([0, d, 0.0])
    return (lambda n: _rect(rng, n, origin, u, v)), w * d


def _wall_obj(rng, cfg):
    side = int(rng.integers(4))
    w = rng.uniform(0.4 * cfg.extent, cfg.extent)
    h = rng.uniform(0.7 * cfg.height, cfg.height)
    s = rng.uniform(0, cfg.extent - w)
    e = cfg.extent
    origin, u = [
        (np.array([s, 0, 0.0]), np.array([w, 0, 0.0])),
        (np.array([s, e, 0.0]), np.array([w, 0, 0.0])),
        (np.array([0, s, 0.0]), np.array([0, w, 0.0])),
        (np.array([e, s, 0.0]), np.array([0, w, 0.0])),
    ][side]
    v = np.array([0, 0, h])
    return (lambda n: _rect(rng, n, origin, u, v)), w * h


def _place(rng, cfg, margin):
    return rng.uniform(margin, cfg.extent - margin, size=2)


def _box_obj(rng, cfg):
    sx, sy = rng.uniform(0.3, 0.9, size=2)
    sz = rng.uniform(0.4, 1.2)
    cx, cy = _place(rng, cfg, 0.6)
    yaw = rng.uniform(0, 2 * math.pi)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    faces = [  # (origin, u, v) in the box frame, bottom face omitted
        (np.array([0, 0, sz]), np.array([sx, 0, 0]), np.array([0, sy, 0])),
        (np.array([0, 0, 0.0]), np.array([sx, 0, 0]), np.array([0, 0, sz])),
        (np.array([0, sy, 0.0]), np.array([sx, 0, 0]), np.array([0, 0, sz])),
        (np.array([0, 0, 0.0]), np.array([0, sy, 0]), np.array([0, 0, sz])),
        (np.array([sx, 0, 0.0]), np.array([0, sy, 0]), np.array([0, 0, sz])),
    ]
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    offset = np.array([cx, cy, 0.0]) - rot @ np.array([sx / 2, sy / 2, 0.0])

    def sample(n):
        face = rng.choice(len(faces), size=n, p=areas / areas.sum())
        pts = np.empty((n, 3))
        for f, (o, u, v) in enumerate(faces):
            sel = face == f
            pts[sel] = _rect(rng, int(sel.sum()), o, u, v)
        return pts @ rot.T + offset

    return sample, float(areas.sum())


def _sphere_obj(rng, cfg):
    r = rng.uniform(0.15, 0.4)
    cx, cy = _place(rng, cfg, 0.5)
    cz = r + rng.uniform(0.0, 0.6)
    center = np.array([cx, cy, cz])

    def sample(n):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + r * d

    return sample, 4 * math.pi * r * r


def _cyl_sampler(rng, center_xy, r, h, cap):
    lateral = 2 * math.pi * r * h
    top = math.pi * r * r if cap else 0.0

    def sample(n):
        on_top = rng.uniform(size=n) < top / (lateral + top)
        theta = rng.uniform(0, 2 * math.pi, size=n)
        rad = np.where(on_top, r * np.sqrt(rng.uniform(size=n)), r)
        z = np.where(on_top, h, rng.uniform(0, h, size=n))
        return np.stack(
            [center_xy[0] + rad * np.cos(theta), center_xy[1] + rad * np.sin(theta), z], axis=1
        )

    return sample, lateral + top


def _cylinder_obj(rng, cfg):
    r = rng.uniform(0.15, 0.35)
    h = rng.uniform(0.3, 0.9)
    return _cyl_sampler(rng, _place(rng, cfg, 0.5), r, h, cap=True)


def _pillar_obj(rng, cfg):
    r = rng.uniform(0.1, 0.2)
    return _cyl_sampler(rng, _place(rng, cfg, 0.3), r, cfg.height, cap=False)


_BUILDERS = {
    "floor": _floor_obj,
    "wall": _wall_obj,
    "box": _box_obj,
    "sphere": _sphere_obj,
    "cylinder": _cylinder_obj,
    "pillar": _pillar_obj,
}


def _allocate(n_points, areas, minimum):
    """Split n_points by area (largest remainder) with a per-object floor."""
    n_obj = len(areas)
    spare = n_points - minimum * n_obj
    share = spare * np.asarray(areas) / np.sum(areas)
    counts = np.floor(share).astype(np.int64)
    rest = spare - counts.sum()
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts + minimum


def generate_scene(config: SceneConfig) -> tuple[PointCloud, DenseLabels]:
    """Sample one labeled scene; deterministic in ``config.rng_seed``."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    palette = config.palette[: config.n_classes]
    if config.object_classes is not None:
        classes = list(config.object_classes)
    else:
        n_obj = int(rng.integers(config.object_count[0], config.object_count[1] + 1))
        classes = []
        if n_obj >= config.n_classes:
            classes = list(rng.permutation(config.n_classes))
        classes += list(rng.integers(config.n_classes, size=n_obj - len(classes)))

    samplers, areas = [], []
    for c in classes:
        sample, area = _BUILDERS[palette[c].primitive](rng, config)
        samplers.append(sample)
        areas.append(area)
    counts = _allocate(config.n_points, areas, config.min_points_per_object)

    locs, feats, cls, ins = [], [], [], []
    for inst, (c, sample, n) in enumerate(zip(classes, samplers, counts)):
        n = int(n)
        pts = sample(n) + rng.normal(0.0, config.surface_noise, size=(n, 3))
        base = np.asarray(palette[c].color) + rng.normal(0.0, config.instance_color_noise, size=3)
        col = base + rng.normal(0.0, config.color_noise, size=(n, 3))
        locs.append(pts)
        feats.append(np.clip(col, 0.0, 1.0))
        cls.append(np.full(n, c, dtype=np.int64))
        ins.append(np.full(n, inst, dtype=np.int64))
    cloud = PointCloud(np.concatenate(locs), np.concatenate(feats))
    return cloud, DenseLabels(np.concatenate(cls), np.concatenate(ins))


def sample_clicks(labels: DenseLabels, scheme: ClickScheme, rng: np.random.Generator | None = None) -> SparseLabels:
    """``clicks_per_thing`` uniformly chosen points per instance, labels copied from truth."""
    if rng is None:
        rng = np.random.default_rng(scheme.rng_seed)
    idx = []
    for inst in np.unique(labels.instance_per_point):
        members = np.flatnonzero(labels.instance_per_point == inst)
        if members.size < scheme.clicks_per_thing:
            raise AnnotationError(
                f"instance {int(inst)} has {members.size} points, "
                f"cannot place {scheme.clicks_per_thing} clicks"
            )
        idx.append(rng.choice(members, size=scheme.clicks_per_thing, replace=False))
    idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    return SparseLabels(idx, labels.class_per_point[idx])


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    cloud_path: Path
    clicks_path: Path

    def load(self):
        cloud, dense = load_cloud(self.cloud_path, "binary")
        return cloud, dense, load_clicks(self.clicks_path)


def make_dataset(config: SceneConfig, n_train: int, n_test: int, scheme: ClickScheme, out_dir) -> Path:
    """Write scenes, click files and ``manifest.tsv``; returns the manifest path.

    Scene ``i`` uses seed ``config.rng_seed + i`` and click seed
    ``scheme.rng_seed + i``.  The manifest's leading comment records the
    overall label fraction sum(M) / sum(N).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    total_m = total_n = 0
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        scene_cfg = _with_seed(config, config.rng_seed + i)
        cloud, dense = generate_scene(scene_cfg)
        clicks = sample_clicks(dense, ClickScheme(scheme.clicks_per_thing, scheme.rng_seed + i))
        cloud_name, click_name = f"scene_{i:04d}.bin", f"scene_{i:04d}.clicks"
        save_cloud(cloud, dense, out / cloud_name, "binary")
        save_clicks(clicks, out / click_name)
        lines.append(f"{split}\t{cloud_name}\t{click_name}")
        total_m += clicks.n_labeled
        total_n += cloud.n_points
    fraction = total_m / total_n if total_n else 0.0
    manifest = out / "manifest.tsv"
    with open(manifest, "w") as fh:
        fh.write(
            f"# label_fraction={fraction!r} labeled={total_m} points={total_n} "
            f"n_classes={config.n_classes}\n"
        )
        fh.write("\n".join(lines) + "\n")
    return manifest


def _with_seed(config: SceneConfig, seed: int) -> SceneConfig:
    return replace(config, rng_seed=seed)


def read_manifest(path) -> tuple[list[ManifestEntry], dict]:
    """Parse a manifest; returns entries and the header fields."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries, meta = [], {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    key, val = tok.split("=", 1)
                    meta[key] = float(val) if "." in val or "e" in val else int(val)
            continue
        parts = raw.rstrip("\n").split("\t")
        if len(parts) != 3 or parts[0] not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: expected 'split<TAB>cloud<TAB>clicks'")
        entries.append(ManifestEntry(parts[0], path.parent / parts[1], path.parent / parts[2]))
    return entries, meta
