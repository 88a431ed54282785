"""Training losses with analytic gradients w.r.t. logits.

Every loss takes raw logits of the branch being trained and returns
``(value, grad)``; multi-view losses return one gradient per view.  Targets
(sparse labels, one-hot and soft pseudo labels) are constants: no gradient
is reported for them.  Per view, points are averaged over the selected set;
views are summed.  An empty selection gives exactly 0 and zero gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import SparseLabels

__all__ = [
    "EPS",
    "DICE_SMOOTH",
    "softmax",
    "seg_loss",
    "reliable_loss",
    "ambiguous_loss",
    "mix_loss",
    "dice_loss",
    "mse_loss",
    "total_loss",
    "LossReport",
]

EPS = 1e-12
DICE_SMOOTH = 1.0


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(p, g):
    """Pull a gradient w.r.t. probabilities back to logits."""
    return p * (g - np.sum(g * p, axis=1, keepdims=True))


def _as_logits(x, name="logits"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be N x C, got shape {x.shape}")
    return x


def _check_targets(target, mask, logits_list, what):
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not logits_list:
        raise ValueError("need at least one view of logits")
    for k, z in enumerate(logits_list):
        if z.shape != target.shape:
            raise ValueError(f"{what}: view {k} logits {z.shape} != target {target.shape}")
    if mask.shape[0] != target.shape[0]:
        raise ValueError(f"{what}: mask length {mask.shape[0]} != {target.shape[0]} points")
    return target, mask


def _ce_one_hot(one_hot, mask, z):
    """Mean CE over masked rows against a one-hot target, with its gradient."""
    grad = np.zeros_like(z)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        return 0.0, grad
    p = softmax(z[rows])
    y = one_hot[rows]
    picked = np.sum(p * y, axis=1)
    loss = float(np.mean(-np.log(np.maximum(picked, EPS))))
    grad[rows] = (p - y) / rows.size
    return loss, grad


def seg_loss(logits, labels: SparseLabels) -> tuple[float, np.ndarray]:
    """Cross-entropy over the M labeled points."""
    z = _as_logits(logits)
    n, c = z.shape
    labels.validate(n, c)
    grad = np.zeros_like(z)
    m = labels.n_labeled
    if m == 0:
        return 0.0, grad
    p = softmax(z[labels.indices])
    picked = p[np.arange(m), labels.classes]
    loss = float(np.mean(-np.log(np.maximum(picked, EPS))))
    p[np.arange(m), labels.classes] -= 1.0
    grad[labels.indices] = p / m
    return loss, grad


def reliable_loss(one_hot, mask, aug_logits) -> tuple[float, list[np.ndarray]]:
    """Sum over views of the mean CE between one-hot pseudo labels and each view."""
    zs = [_as_logits(z) for z in aug_logits]
    one_hot, mask = _check_targets(one_hot, mask, zs, "reliable_loss")
    total, grads = 0.0, []
    for z in zs:
        l, g = _ce_one_hot(one_hot, mask, z)
        total += l
        grads.append(g)
    return total, grads


def ambiguous_loss(soft, amb_mask, aug_logits) -> tuple[float, list[np.ndarray]]:
    """Sum over views of the mean KL(soft || p_view) on ambiguous points.

    The value includes the target entropy term so it is a true KL; the
    gradient w.r.t. logits is ``(p - t) / n_ambiguous``.
    """
    zs = [_as_logits(z) for z in aug_logits]
    soft, amb_mask = _check_targets(soft, amb_mask, zs, "ambiguous_loss")
    rows = np.flatnonzero(amb_mask)
    grads = [np.zeros_like(z) for z in zs]
    if rows.size == 0:
        return 0.0, grads
    t = soft[rows]
    neg_entropy = np.sum(t * np.log(np.maximum(t, EPS)), axis=1)
    total = 0.0
    for z, g in zip(zs, grads):
        p = softmax(z[rows])
        cross = -np.sum(t * np.log(np.maximum(p, EPS)), axis=1)
        total += float(np.mean(neg_entropy + cross))
        g[rows] = (p - t) / rows.size
    return total, grads


def mix_loss(one_hot, mask, mix_logits) -> tuple[float, np.ndarray]:
    """Mean CE of the mixed view against the reliable one-hot pseudo labels."""
    z = _as_logits(mix_logits)
    one_hot, mask = _check_targets(one_hot, mask, [z], "mix_loss")
    return _ce_one_hot(one_hot, mask, z)


def dice_loss(one_hot, mask, aug_logits, smooth: float = DICE_SMOOTH) -> tuple[float, list[np.ndarray]]:
    """Soft Dice drop-in for :func:`reliable_loss`.

    Per view: ``mean_c [1 - (2 sum p*y + s) / (sum p^2 + sum y^2 + s)]`` over
    the reliable rows.
    """
    zs = [_as_logits(z) for z in aug_logits]
    one_hot, mask = _check_targets(one_hot, mask, zs, "dice_loss")
    rows = np.flatnonzero(mask)
    grads = [np.zeros_like(z) for z in zs]
    if rows.size == 0:
        return 0.0, grads
    y = one_hot[rows]
    n_cls = y.shape[1]
    total = 0.0
    for z, g in zip(zs, grads):
        p = softmax(z[rows])
        inter = np.sum(p * y, axis=0)
        denom = np.sum(p * p, axis=0) + np.sum(y * y, axis=0) + smooth
        num = 2.0 * inter + smooth
        total += float(np.mean(1.0 - num / denom))
        d_p = -(2.0 * y / denom - num * 2.0 * p / denom**2) / n_cls
        g[rows] = _softmax_vjp(p, d_p)
    return total, grads


def mse_loss(soft, amb_mask, aug_logits) -> tuple[float, list[np.ndarray]]:
    """Squared-error drop-in for :func:`ambiguous_loss` (mean over rows and classes)."""
    zs = [_as_logits(z) for z in aug_logits]
    soft, amb_mask = _check_targets(soft, amb_mask, zs, "mse_loss")
    rows = np.flatnonzero(amb_mask)
    grads = [np.zeros_like(z) for z in zs]
    if rows.size == 0:
        return 0.0, grads
    t = soft[rows]
    total = 0.0
    for z, g in zip(zs, grads):
        p = softmax(z[rows])
        diff = p - t
        total += float(np.mean(diff * diff))
        g[rows] = _softmax_vjp(p, 2.0 * diff / diff.size)
    return total, grads


def total_loss(seg, reliable, ambiguous, mix, lambda1=1.0, lambda2=1.0, lambda3=1.0) -> float:
    return seg + lambda1 * reliable + lambda2 * ambiguous + lambda3 * mix


@dataclass
class LossReport:
    seg: float = 0.0
    reliable: float = 0.0
    ambiguous: float = 0.0
    mix: float = 0.0
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    grads: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return total_loss(self.seg, self.reliable, self.ambiguous, self.mix, *self.lambdas)
