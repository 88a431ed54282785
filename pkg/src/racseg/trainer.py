"""End-to-end training loop, evaluation and pseudo-label bookkeeping.

One training step, per scene:

1. predict on the original cloud (P) and on K augmented views;
2. split points into reliable / ambiguous sets from the K+1 predictions;
3. predict on a per-point mix of two views;
4. CE on the clicks, CE (or Dice) on reliable points of every view, KL (or
   MSE) on ambiguous points of every view, CE on reliable points of the mix;
5. one SGD step on the scene-averaged gradient.

Pseudo labels are built from the original prediction and treated as
constants.  All views share the neighbour graph of the original cloud.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import losses as L
from .augment import AugmentationSpec, apply_method, mix_augment
from .pointcloud import DenseLabels, PointCloud, SparseLabels, default_threads, knn_indices
from .reliability import ReliabilityPartition, build_bundle, partition
from .segmodel import (
    PARAM_NAMES,
    ModelConfig,
    ModelParams,
    Normalizer,
    TrainingError,
    TrainState,
    backward,
    forward,
    init_state,
    save_checkpoint,
    sgd_step,
)
from .synthdata import read_manifest

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Scene",
    "MetricsRecord",
    "StepDetail",
    "PseudoLabelStats",
    "prepare_scene",
    "load_scenes",
    "train_step",
    "scene_gradients",
    "evaluate",
    "iou_from_predictions",
    "pseudo_label_stats",
    "selection_snapshot",
    "run_training",
    "METRICS_HEADER",
]

METRICS_HEADER = (
    "step", "seg", "rel", "amb", "mix", "total",
    "reliable_count", "reliable_frac", "pl_acc", "miou", "secs",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    tau: float = 0.7
    kappa: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    reliable_loss: str = "ce"
    ambiguous_loss: str = "kl"
    eval_interval: int = 50
    seed: int = 0
    deterministic: bool = True
    hidden: int = 64
    k_neighbors: int = 16
    threads: int | None = None

    @property
    def k(self) -> int:
        return self.augment.k

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def validate(self):
        self.augment.validate()
        if self.epochs < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_interval >= 1 required")
        if not (self.lr > 0 and 0 <= self.momentum < 1):
            raise ValueError("need lr > 0 and momentum in [0, 1)")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if any(not (lam >= 0 and math.isfinite(lam)) for lam in self.lambdas):
            raise ValueError(f"loss weights must be finite and >= 0, got {self.lambdas}")
        if self.reliable_loss not in ("ce", "dice"):
            raise ValueError(f"reliable_loss must be 'ce' or 'dice', got {self.reliable_loss!r}")
        if self.ambiguous_loss not in ("kl", "mse"):
            raise ValueError(f"ambiguous_loss must be 'kl' or 'mse', got {self.ambiguous_loss!r}")
        if self.hidden < 1 or self.k_neighbors < 1:
            raise ValueError("hidden width and neighbourhood size must be >= 1")


@dataclass(eq=False)
class Scene:
    name: str
    cloud: PointCloud
    clicks: SparseLabels
    truth: DenseLabels | None
    normalizer: Normalizer
    x: np.ndarray          # standardized original input matrix
    neighbors: np.ndarray

    @property
    def n_points(self) -> int:
        return self.cloud.n_points

    def inputs(self, view: PointCloud) -> np.ndarray:
        return self.normalizer(view).as_matrix()


def prepare_scene(name, cloud: PointCloud, clicks: SparseLabels, truth: DenseLabels | None, k: int) -> Scene:
    norm = Normalizer.fit(cloud)
    nbr = knn_indices(cloud, min(k, cloud.n_points))
    return Scene(name, cloud, clicks, truth, norm, norm(cloud).as_matrix(), nbr)


def load_scenes(manifest, k: int, split: str | None = None) -> list[Scene]:
    entries, _ = read_manifest(manifest)
    scenes = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        cloud, dense, clicks = e.load()
        scenes.append(prepare_scene(e.cloud_path.stem, cloud, clicks, dense, k))
    return scenes


class PseudoLabelStats(NamedTuple):
    accuracy: float
    count: int
    empty: bool


def pseudo_label_stats(part: ReliabilityPartition, truth: DenseLabels | np.ndarray) -> PseudoLabelStats:
    """Accuracy of the reliable one-hot labels against ground truth.

    An empty reliable set reports accuracy 1.0 with ``empty=True``.
    """
    gt = truth.class_per_point if isinstance(truth, DenseLabels) else np.asarray(truth)
    if len(gt) != part.n_points:
        raise ValueError("truth does not cover the partitioned scene")
    rows = np.flatnonzero(part.mask)
    if rows.size == 0:
        return PseudoLabelStats(1.0, 0, True)
    pred = np.argmax(part.one_hot[rows], axis=1)
    return PseudoLabelStats(float(np.mean(pred == gt[rows])), int(rows.size), False)


@dataclass
class MetricsRecord:
    step: int
    seg: float = math.nan
    rel: float = math.nan
    amb: float = math.nan
    mix: float = math.nan
    total: float = math.nan
    reliable_count: int | None = None
    reliable_frac: float = math.nan
    pl_acc: float = math.nan
    miou: float = math.nan
    secs: float = math.nan

    def row(self, with_time: bool = True) -> list[str]:
        def f(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(v) if isinstance(v, float) else str(v)

        vals = [self.step, self.seg, self.rel, self.amb, self.mix, self.total,
                self.reliable_count, self.reliable_frac, self.pl_acc, self.miou,
                self.secs if with_time else math.nan]
        return [f(v) for v in vals]


@dataclass(eq=False)
class StepDetail:
    """Per-scene intermediate results of one step (for inspection and tests)."""

    partitions: list
    bundles: list
    mix_pairs: list
    grads: dict


def _zero_grads(params: ModelParams) -> dict:
    return {n: np.zeros_like(params[n]) for n in PARAM_NAMES}


def _accumulate(acc: dict, grads: dict) -> None:
    for n in PARAM_NAMES:
        acc[n] += grads[n]


def _pick_mix_pair(k: int, rng: np.random.Generator) -> tuple[int, int]:
    """Ordered pair of distinct view ids; 0 is the original, 1..K augmented."""
    if k == 1:
        return (0, 1)
    m, n = rng.choice(k, size=2, replace=False)
    return (int(m) + 1, int(n) + 1)


def _scene_views(scene: Scene, spec: AugmentationSpec, rng: np.random.Generator):
    children = rng.spawn(spec.k)
    return [apply_method(scene.cloud, m, spec, r) for m, r in zip(spec.methods, children)]


def _scene_pass(params, scene: Scene, config: TrainConfig, rng: np.random.Generator, pool):
    """Forward passes, partition and losses for one scene.

    Returns the losses, per-branch logit gradients with their tapes, and the
    partition.  Random draws happen up front so a thread pool cannot change
    the outcome.
    """
    view_rng, mix_rng = rng.spawn(2)
    views = _scene_views(scene, config.augment, view_rng)
    pair = _pick_mix_pair(config.k, mix_rng)
    all_views = [scene.cloud] + views
    mixed = mix_augment(all_views[pair[0]], all_views[pair[1]], mix_rng, source_views=pair)

    inputs = [scene.x] + [scene.inputs(v) for v in views] + [scene.inputs(mixed.cloud)]

    def run(x):
        return forward(params, x, scene.neighbors)

    outs = list(pool.map(run, inputs)) if pool is not None else [run(x) for x in inputs]
    logits = [o[0] for o in outs]
    tapes = [o[1] for o in outs]
    z0, z_aug, z_mix = logits[0], logits[1:-1], logits[-1]
    if not all(np.isfinite(z).all() for z in logits):
        raise TrainingError(f"non-finite logits in scene {scene.name}")

    p0 = L.softmax(z0)
    bundle = build_bundle(p0, [L.softmax(z) for z in z_aug])
    part = partition(p0, bundle.mean, bundle.deviation, config.tau, config.kappa)

    seg, g_seg = L.seg_loss(z0, scene.clicks)
    if config.reliable_loss == "ce":
        rel, g_rel = L.reliable_loss(part.one_hot, part.mask, z_aug)
    else:
        rel, g_rel = L.dice_loss(part.one_hot, part.mask, z_aug)
    if config.ambiguous_loss == "kl":
        amb, g_amb = L.ambiguous_loss(part.soft, ~part.mask, z_aug)
    else:
        amb, g_amb = L.mse_loss(part.soft, ~part.mask, z_aug)
    mix, g_mix = L.mix_loss(part.one_hot, part.mask, z_mix)

    l1, l2, l3 = config.lambdas
    branch_grads = [g_seg] + [l1 * gr + l2 * ga for gr, ga in zip(g_rel, g_amb)] + [l3 * g_mix]
    total = L.total_loss(seg, rel, amb, mix, l1, l2, l3)
    values = (seg, rel, amb, mix, total)
    if not all(math.isfinite(v) for v in values):
        raise TrainingError(f"non-finite loss in scene {scene.name}: {values}")
    return values, list(zip(tapes, branch_grads)), part, bundle, pair


def scene_gradients(params, scene: Scene, config: TrainConfig, rng: np.random.Generator, pool=None):
    """Loss values and parameter gradients for one scene, pseudo labels held fixed."""
    values, branches, part, bundle, pair = _scene_pass(params, scene, config, rng, pool)
    grads = _zero_grads(params)
    # fixed order: original, views 1..K, mix
    for tape, g in branches:
        if g.any():
            _accumulate(grads, backward(tape, g))
    return values, grads, part, bundle, pair


def train_step(state: TrainState, batch: list[Scene], config: TrainConfig, rng: np.random.Generator):
    """One optimisation step over ``batch``; returns ``(state', record, detail)``."""
    if not batch:
        raise ValueError("empty batch")
    threads = 1 if config.deterministic else (config.threads or default_threads())
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        params = state.params
        grads = _zero_grads(params)
        sums = np.zeros(5)
        count = n_points = 0
        correct = 0
        have_truth = True
        parts, bundles, pairs = [], [], []
        for scene, scene_rng in zip(batch, rng.spawn(len(batch))):
            values, scene_grads, part, bundle, pair = scene_gradients(params, scene, config, scene_rng, pool)
            _accumulate(grads, scene_grads)
            sums += values
            count += part.reliable_count
            n_points += scene.n_points
            if scene.truth is not None:
                rows = np.flatnonzero(part.mask)
                correct += int(np.sum(part.labels[rows] == scene.truth.class_per_point[rows]))
            else:
                have_truth = False
            parts.append(part)
            bundles.append(bundle)
            pairs.append(pair)
    finally:
        if pool is not None:
            pool.shutdown()

    b = len(batch)
    for n in PARAM_NAMES:
        grads[n] = grads[n] / b
    new_state = sgd_step(state, grads)
    mean = sums / b
    if not have_truth:
        pl_acc = math.nan
    else:
        pl_acc = correct / count if count else 1.0
    record = MetricsRecord(
        step=new_state.step,
        seg=float(mean[0]), rel=float(mean[1]), amb=float(mean[2]), mix=float(mean[3]),
        total=float(mean[4]),
        reliable_count=int(count),
        reliable_frac=count / n_points,
        pl_acc=float(pl_acc),
    )
    return new_state, record, StepDetail(parts, bundles, pairs, grads)


def iou_from_predictions(pred, truth, n_classes: int):
    """Pooled per-class IoU; classes absent from truth and prediction are NaN.

    Returns ``(miou, iou)`` where ``miou`` averages classes present in truth.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth differ in length")
    conf = np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes)
    conf = conf.reshape(n_classes, n_classes)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = conf.sum(axis=1) > 0
    miou = float(np.mean(iou[present])) if present.any() else math.nan
    return miou, iou


def evaluate(params: ModelParams, scenes: list[Scene]):
    """mIoU of argmax predictions on the un-augmented clouds, pooled over scenes."""
    if not scenes:
        raise ValueError("no scenes to evaluate")
    preds, truths = [], []
    for s in scenes:
        if s.truth is None:
            raise ValueError(f"scene {s.name} has no ground truth")
        logits, _ = forward(params, s.x, s.neighbors)
        preds.append(np.argmax(logits, axis=1))
        truths.append(s.truth.class_per_point)
    return iou_from_predictions(np.concatenate(preds), np.concatenate(truths), params.config.n_classes)


def selection_snapshot(params: ModelParams, scenes: list[Scene], config: TrainConfig, rng: np.random.Generator, kappas=(None, math.inf)):
    """Pseudo-label stats of several selection rules on identical predictions.

    ``None`` in ``kappas`` stands for ``config.kappa``.  Returns one
    ``PseudoLabelStats`` per kappa, pooled over ``scenes``.
    """
    kappas = [config.kappa if k is None else k for k in kappas]
    correct = np.zeros(len(kappas))
    counts = np.zeros(len(kappas), dtype=np.int64)
    for scene, r in zip(scenes, rng.spawn(len(scenes))):
        views = _scene_views(scene, config.augment, r.spawn(2)[0])
        p0 = L.softmax(forward(params, scene.x, scene.neighbors)[0])
        paug = [L.softmax(forward(params, scene.inputs(v), scene.neighbors)[0]) for v in views]
        bundle = build_bundle(p0, paug)
        for j, kap in enumerate(kappas):
            st = pseudo_label_stats(partition(p0, bundle.mean, bundle.deviation, config.tau, kap), scene.truth)
            counts[j] += st.count
            correct[j] += st.accuracy * st.count
    return [
        PseudoLabelStats(float(c / n) if n else 1.0, int(n), n == 0)
        for c, n in zip(correct, counts)
    ]


def _seed_streams(seed: int):
    init_seq, shuffle_seq, step_seq = np.random.SeedSequence(seed).spawn(3)
    return (
        int(init_seq.generate_state(1)[0]),
        np.random.default_rng(shuffle_seq),
        np.random.default_rng(step_seq),
    )


def model_config_for(config: TrainConfig, feature_dim: int, n_classes: int) -> ModelConfig:
    return ModelConfig(3 + feature_dim, config.hidden, n_classes, config.k_neighbors)


def run_training(
    config: TrainConfig,
    manifest,
    out_dir,
    n_classes: int | None = None,
    scenes: tuple[list[Scene], list[Scene]] | None = None,
    callback=None,
) -> Path:
    """Train on the manifest's train split and write ``metrics.csv`` + ``checkpoint.bin``.

    Evaluates on the test split every ``eval_interval`` steps and after the
    last step.  ``callback(state, record)`` runs after every train step.
    Returns the metrics path.  Rows are flushed as they are written.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if scenes is None:
        train = load_scenes(manifest, config.k_neighbors, "train")
        test = load_scenes(manifest, config.k_neighbors, "test")
        if n_classes is None:
            n_classes = read_manifest(manifest)[1].get("n_classes")
    else:
        train, test = scenes
    if not train:
        raise ValueError(f"{manifest}: no training scenes")
    if n_classes is None:
        n_classes = _infer_classes(train + test)
    mcfg = model_config_for(config, train[0].cloud.feature_dim, n_classes)
    init_seed, shuffle_rng, step_rng = _seed_streams(config.seed)
    state = init_state(mcfg, init_seed, config.lr, config.momentum)

    metrics_path = out / "metrics.csv"
    t0 = time.perf_counter()
    with_time = not config.deterministic
    last_eval = -1
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        fh.flush()

        def do_eval():
            miou, _ = evaluate(state.params, test) if test else (math.nan, None)
            rec = MetricsRecord(step=state.step, miou=miou, secs=time.perf_counter() - t0)
            writer.writerow(rec.row(with_time))
            fh.flush()
            log.info("step %d  test mIoU %.4f", state.step, miou)
            return rec

        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(train))
            for b0 in range(0, len(order), config.batch_size):
                batch = [train[i] for i in order[b0 : b0 + config.batch_size]]
                try:
                    state, rec, _ = train_step(state, batch, config, step_rng)
                except TrainingError:
                    fh.flush()
                    raise
                rec.secs = time.perf_counter() - t0
                writer.writerow(rec.row(with_time))
                fh.flush()
                if callback is not None:
                    callback(state, rec)
                if state.step % config.eval_interval == 0:
                    do_eval()
                    last_eval = state.step
            log.debug("epoch %d done at step %d", epoch, state.step)
        if last_eval != state.step:
            do_eval()
    save_checkpoint(state.params, out / "checkpoint.bin")
    return metrics_path


def _infer_classes(scenes: list[Scene]) -> int:
    top = 0
    for s in scenes:
        if s.truth is not None:
            top = max(top, int(s.truth.class_per_point.max()) + 1)
        if s.clicks.n_labeled:
            top = max(top, int(s.clicks.classes.max()) + 1)
    return max(top, 2)


def read_metrics(path) -> list[dict]:
    """Rows of a metrics CSV as dicts (empty cells become None)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        got = tuple(reader.fieldnames or ())
        if got != METRICS_HEADER:
            missing = [c for c in METRICS_HEADER if c not in got]
            extra = [c for c in got if c not in METRICS_HEADER]
            if missing:
                what = f"missing column {missing[0]!r}"
            elif extra:
                what = f"unexpected column {extra[0]!r}"
            else:
                col = next(g for g, e in zip(got, METRICS_HEADER) if g != e)
                what = f"column {col!r} out of order"
            raise ValueError(f"{path}: metrics schema mismatch, {what}")
        rows = []
        for r in reader:
            rows.append({k: (None if v == "" else float(v)) for k, v in r.items()})
    return rows
