"""Confidence/uncertainty across prediction views and the reliable/ambiguous split.

Given the prediction P on the original cloud and K predictions on augmented
views, a point is *reliable* when some class is both confidently predicted on
average (mean >= tau) and stable across views (population std <= kappa) for
that same class.  Reliable points get one-hot pseudo labels from the argmax
of P; the rest keep P itself as a soft target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PredictionBundle",
    "ReliabilityPartition",
    "mean_prediction",
    "uncertainty",
    "partition",
    "build_bundle",
    "DEFAULT_TAU",
    "DEFAULT_KAPPA",
]

DEFAULT_TAU = 0.7
DEFAULT_KAPPA = 0.05
_ROW_TOL = 1e-9


def _check_probs(name, p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"{name} must be an N x C matrix, got shape {p.shape}")
    if (p < 0).any() or not np.isfinite(p).all():
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > _ROW_TOL:
        raise ValueError(f"{name} rows do not sum to 1")
    return p


def _check_views(original, augmented):
    original = _check_probs("original", original)
    augmented = list(augmented)
    if not augmented:
        raise ValueError("need at least one augmented prediction (K >= 1)")
    checked = []
    for k, a in enumerate(augmented):
        a = _check_probs(f"augmented[{k}]", a)
        if a.shape != original.shape:
            raise ValueError(f"augmented[{k}] shape {a.shape} != original {original.shape}")
        checked.append(a)
    return original, checked


def mean_prediction(original, augmented) -> np.ndarray:
    """Elementwise mean of the K+1 probability matrices."""
    original, augmented = _check_views(original, augmented)
    # offsets from the original keep equal views exactly equal to their mean
    shift = np.zeros_like(original)
    for a in augmented:
        shift += a - original
    return original + shift / (len(augmented) + 1)


def uncertainty(original, augmented, mean=None) -> np.ndarray:
    """Per-class population standard deviation over the K+1 views."""
    original, augmented = _check_views(original, augmented)
    if mean is None:
        mean = mean_prediction(original, augmented)
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != original.shape:
        raise ValueError(f"mean shape {mean.shape} != predictions {original.shape}")
    sq = (original - mean) ** 2
    for a in augmented:
        sq += (a - mean) ** 2
    return np.sqrt(sq / (len(augmented) + 1))


@dataclass(frozen=True, eq=False)
class ReliabilityPartition:
    mask: np.ndarray       # N bool, True = reliable
    one_hot: np.ndarray    # N x C, zero rows on ambiguous points
    soft: np.ndarray       # N x C, zero rows on reliable points
    tau: float
    kappa: float

    @property
    def labels(self) -> np.ndarray:
        """Hard pseudo label per point (-1 on ambiguous points)."""
        out = np.argmax(self.one_hot, axis=1)
        out[~self.mask] = -1
        return out

    @property
    def reliable_count(self) -> int:
        return int(self.mask.sum())

    @property
    def n_points(self) -> int:
        return self.mask.shape[0]


def partition(original, mean, deviation, tau: float = DEFAULT_TAU, kappa: float = DEFAULT_KAPPA) -> ReliabilityPartition:
    """Split points into reliable / ambiguous sets.

    ``kappa=inf`` turns off the uncertainty test and reproduces plain
    confidence thresholding on the mean prediction.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if not kappa >= 0.0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    original = np.asarray(original, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    deviation = np.asarray(deviation, dtype=np.float64)
    if not (original.shape == mean.shape == deviation.shape) or original.ndim != 2:
        raise ValueError("original, mean and deviation must share an N x C shape")

    # same class c must pass both tests
    votes = (mean >= tau) & (deviation <= kappa)
    mask = votes.any(axis=1)

    n, c = original.shape
    one_hot = np.zeros((n, c))
    rows = np.flatnonzero(mask)
    one_hot[rows, np.argmax(original[rows], axis=1)] = 1.0
    soft = np.where(mask[:, None], 0.0, original)
    for a in (mask, one_hot, soft):
        a.setflags(write=False)
    return ReliabilityPartition(mask, one_hot, soft, float(tau), float(kappa))


@dataclass(frozen=True, eq=False)
class PredictionBundle:
    original: np.ndarray
    augmented: tuple
    mean: np.ndarray
    deviation: np.ndarray

    @property
    def k(self) -> int:
        return len(self.augmented)


def build_bundle(original, augmented) -> PredictionBundle:
    mean = mean_prediction(original, augmented)
    dev = uncertainty(original, augmented, mean)
    return PredictionBundle(
        np.asarray(original, dtype=np.float64),
        tuple(np.asarray(a, dtype=np.float64) for a in augmented),
        mean,
        dev,
    )
