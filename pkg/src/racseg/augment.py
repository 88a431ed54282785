"""Index-preserving point cloud augmentations.

Three base augmentations (PointWolf local deformation, global affine
transform, point-wise jitter) plus the per-point convex mix of two views.
Every op returns a cloud with the same number of rows in the same order, so
predictions on an augmented view line up with the original point by point.

All randomness comes from an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

__all__ = [
    "AffineParams",
    "AffineRanges",
    "PointWolfParams",
    "NoiseParams",
    "MixSample",
    "AugmentationSpec",
    "affine_transform",
    "sample_affine",
    "pointwise_noise",
    "pointwolf_deform",
    "farthest_point_sampling",
    "gen_augmented_views",
    "mix_augment",
    "METHODS",
]

METHODS = ("pointwolf", "affine", "noise")


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rotation_z(az) @ ry @ rx


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    rotation_angle: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self):
        vals = [self.rotation_angle, self.scale, *self.translation]
        if len(self.translation) != 3 or not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite or malformed affine params: {self}")
        if self.scale <= 0:
            raise ValueError(f"affine scale must be positive, got {self.scale}")
        if not 0.0 <= self.rotation_angle < 2 * math.pi:
            raise ValueError(f"rotation angle must lie in [0, 2pi), got {self.rotation_angle}")


@dataclass(frozen=True)
class AffineRanges:
    scale: tuple[float, float] = (0.8, 1.25)
    translation: float = 0.2

    def validate(self):
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ValueError(f"bad affine scale range {self.scale}")
        if self.translation < 0:
            raise ValueError("affine translation range must be >= 0")


def sample_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    angle = float(rng.uniform(0.0, 2 * math.pi))
    scale = float(rng.uniform(*ranges.scale))
    t = rng.uniform(-ranges.translation, ranges.translation, size=3)
    return AffineParams(angle, scale, tuple(float(v) for v in t))


def affine_transform(cloud: PointCloud, params: AffineParams) -> PointCloud:
    """Rotate about z, scale and translate the whole cloud about its centroid.

    Computed as a displacement ``x + (sR - I)(x - c) + t`` so identity
    parameters give back the input bit for bit.
    """
    params.validate()
    loc = cloud.locations
    centroid = loc.mean(axis=0)
    lin = params.scale * rotation_z(params.rotation_angle) - np.eye(3)
    disp = (loc - centroid) @ lin.T + np.asarray(params.translation)
    return cloud.replace(locations=loc + disp)


# ---------------------------------------------------------------------------
# point-wise noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseParams:
    sigma: float = 0.01
    clip: float = 0.05

    def validate(self):
        if not (math.isfinite(self.sigma) and math.isfinite(self.clip)):
            raise ValueError("noise params must be finite")
        if self.sigma < 0 or self.clip < 0:
            raise ValueError(f"noise sigma and clip must be >= 0, got {self}")


def pointwise_noise(cloud: PointCloud, params: NoiseParams, rng: np.random.Generator) -> PointCloud:
    params.validate()
    g = rng.normal(0.0, 1.0, size=cloud.locations.shape) * params.sigma
    g = np.clip(g, -params.clip, params.clip)
    return cloud.replace(locations=cloud.locations + g)


# ---------------------------------------------------------------------------
# PointWolf
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointWolfParams:
    """Sampling ranges for the kernel-weighted local rigid transforms.

    ``max_rotation`` is per axis in radians, ``scale`` a closed interval for
    the per-anchor, per-axis scale and ``max_translation`` a per-axis bound
    in meters.
    """

    n_anchors: int = 4
    kernel_bandwidth: float = 0.5
    max_rotation: float = math.radians(15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    max_translation: float = 0.1

    def validate(self):
        if self.n_anchors < 1:
            raise ValueError("PointWolf needs at least one anchor")
        if not (self.kernel_bandwidth > 0 and math.isfinite(self.kernel_bandwidth)):
            raise ValueError("PointWolf bandwidth must be positive")
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ValueError(f"bad PointWolf scale range {self.scale}")
        if self.max_rotation < 0 or self.max_translation < 0:
            raise ValueError("PointWolf ranges must be >= 0")


@dataclass(frozen=True)
class AnchorTransform:
    """Rigid-plus-scale transform around one anchor: x -> R S (x - a) + a + t."""

    rotation: np.ndarray
    scale: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "AnchorTransform":
        return cls(np.eye(3), np.ones(3), np.zeros(3))

    @classmethod
    def translate(cls, t) -> "AnchorTransform":
        return cls(np.eye(3), np.ones(3), np.asarray(t, dtype=np.float64))


def farthest_point_sampling(locations: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy FPS; ties resolved by lowest index."""
    n_pts = locations.shape[0]
    if not 1 <= n <= n_pts:
        raise ValueError(f"cannot pick {n} anchors from {n_pts} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    d2 = np.sum((locations - locations[start]) ** 2, axis=1)
    for j in range(1, n):
        chosen[j] = int(np.argmax(d2))
        d2 = np.minimum(d2, np.sum((locations - locations[chosen[j]]) ** 2, axis=1))
    return chosen


def sample_anchor_transforms(params: PointWolfParams, rng: np.random.Generator) -> list[AnchorTransform]:
    out = []
    for _ in range(params.n_anchors):
        angles = rng.uniform(-params.max_rotation, params.max_rotation, size=3)
        scale = rng.uniform(params.scale[0], params.scale[1], size=3)
        t = rng.uniform(-params.max_translation, params.max_translation, size=3)
        out.append(AnchorTransform(rotation_xyz(*angles), scale, t))
    return out


def pointwolf_deform(
    cloud: PointCloud,
    params: PointWolfParams,
    rng: np.random.Generator,
    transforms: list[AnchorTransform] | None = None,
) -> PointCloud:
    """Smooth non-rigid deformation by blending per-anchor transforms.

    Anchors come from farthest-point sampling started at a random point.
    Each point moves by the Gaussian-kernel weighted average of the anchor
    displacements; weights are normalised per point.  Pass ``transforms``
    to pin the per-anchor transforms instead of sampling them.
    """
    params.validate()
    loc = cloud.locations
    if params.n_anchors > cloud.n_points:
        raise ValueError(
            f"n_anchors={params.n_anchors} exceeds cloud size {cloud.n_points}"
        )
    start = int(rng.integers(cloud.n_points))
    anchors = farthest_point_sampling(loc, params.n_anchors, start)
    if transforms is None:
        transforms = sample_anchor_transforms(params, rng)
    if len(transforms) != params.n_anchors:
        raise ValueError("one transform per anchor required")

    anchor_xyz = loc[anchors]                                   # A x 3
    d2 = np.sum((loc[:, None, :] - anchor_xyz[None]) ** 2, axis=2)  # N x A
    # shift by the per-point minimum so far points do not underflow to 0/0
    logits = -(d2 - d2.min(axis=1, keepdims=True)) / params.kernel_bandwidth**2
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)

    disp = np.zeros_like(loc)
    for a, tf in enumerate(transforms):
        lin = tf.rotation @ np.diag(tf.scale) - np.eye(3)
        d_a = (loc - anchor_xyz[a]) @ lin.T + tf.translation
        disp += w[:, a : a + 1] * d_a
    return cloud.replace(locations=loc + disp)


# ---------------------------------------------------------------------------
# views and mixing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationSpec:
    """Ordered list of K base augmentations; position k is view k."""

    methods: tuple[str, ...] = ("pointwolf", "affine")
    pointwolf: PointWolfParams = field(default_factory=PointWolfParams)
    affine: AffineRanges = field(default_factory=AffineRanges)
    noise: NoiseParams = field(default_factory=NoiseParams)
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def k(self) -> int:
        return len(self.methods)

    def validate(self):
        if not self.methods:
            raise ValueError("augmentation spec needs K >= 1 methods")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown augmentation method {m!r}; choose from {METHODS}")
        self.pointwolf.validate()
        self.affine.validate()
        self.noise.validate()


def apply_method(cloud: PointCloud, method: str, spec: AugmentationSpec, rng: np.random.Generator) -> PointCloud:
    if method == "pointwolf":
        return pointwolf_deform(cloud, spec.pointwolf, rng)
    if method == "affine":
        return affine_transform(cloud, sample_affine(rng, spec.affine))
    if method == "noise":
        return pointwise_noise(cloud, spec.noise, rng)
    raise ValueError(f"unknown augmentation method {method!r}")


def gen_augmented_views(
    cloud: PointCloud, spec: AugmentationSpec, rng: np.random.Generator | None = None
) -> list[PointCloud]:
    """K independent single-method views of ``cloud`` (not chained).

    Without ``rng`` the generator is seeded from ``spec.rng_seed``.  Each
    view draws from its own child stream so views can be built in any order.
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    children = rng.spawn(spec.k)
    return [apply_method(cloud, m, spec, r) for m, r in zip(spec.methods, children)]


@dataclass(frozen=True, eq=False)
class MixSample:
    cloud: PointCloud
    alpha: np.ndarray
    source_views: tuple = (0, 1)


def mix_augment(
    view_m: PointCloud,
    view_n: PointCloud,
    rng: np.random.Generator | None = None,
    alpha: np.ndarray | float | None = None,
    source_views: tuple = (0, 1),
) -> MixSample:
    """Per-point convex combination ``alpha*view_m + (1-alpha)*view_n``.

    Interpolates locations and features alike.  ``alpha`` is drawn
    uniformly per point unless given (a scalar or an N-vector).
    """
    if view_m.locations.shape != view_n.locations.shape or view_m.features.shape != view_n.features.shape:
        raise ValueError(
            f"mix views disagree in shape: {view_m.n_points}x{view_m.feature_dim} vs "
            f"{view_n.n_points}x{view_n.feature_dim}"
        )
    n = view_m.n_points
    if alpha is None:
        if rng is None:
            raise ValueError("mix_augment needs an rng or an explicit alpha")
        a = rng.uniform(0.0, 1.0, size=n)
    else:
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)).copy()
        if ((a < 0) | (a > 1)).any():
            raise ValueError("alpha must lie in [0, 1]")
    xm, xn = view_m.as_matrix(), view_n.as_matrix()
    mixed = a[:, None] * xm + (1.0 - a[:, None]) * xn
    # rounding can step one ulp outside the segment
    mixed = np.clip(mixed, np.minimum(xm, xn), np.maximum(xm, xn))
    a.setflags(write=False)
    return MixSample(PointCloud(mixed[:, :3], mixed[:, 3:]), a, tuple(source_views))
