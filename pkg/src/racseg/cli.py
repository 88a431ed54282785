"""``racseg`` command line: gen-data, train, eval, augment, report.

Exit status is 0 on success, 1 on runtime failure and 2 on usage, config
or input errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .augment import (
    METHODS,
    AffineParams,
    NoiseParams,
    PointWolfParams,
    affine_transform,
    mix_augment,
    pointwise_noise,
    pointwolf_deform,
)
from .config import ConfigError, dump_config, load_config, parse_config
from .pointcloud import CloudParseError, EmptyInputError, load_cloud, save_cloud
from .segmodel import load_checkpoint
from .synthdata import make_dataset, read_manifest
from .trainer import TrainConfig, evaluate, load_scenes, read_metrics, run_training, scene_gradients

class UsageError(Exception):
    pass


def _out(msg=""):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    d = cfg.dataset
    manifest = make_dataset(cfg.scene, d.n_train, d.n_test, d.scheme(), args.out_dir)
    _, meta = read_manifest(manifest)
    (Path(args.out_dir) / "config.yaml").write_text(dump_config(cfg))
    _out(f"manifest {manifest}")
    _out(f"label_fraction {meta['label_fraction']:.6g} ({meta['labeled']} of {meta['points']} points)")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _with_k(spec, k):
    """First ``k`` views, continuing with the unused methods, then cycling."""
    order = list(spec.methods) + [m for m in METHODS if m not in spec.methods]
    return dataclasses.replace(spec, methods=tuple(order[i % len(order)] for i in range(k)))


def _train_overrides(train, args):
    upd = {}
    for name in ("tau", "kappa", "lambda1", "lambda2", "lambda3", "seed", "epochs", "eval_interval"):
        val = getattr(args, name)
        if val is not None:
            upd[name] = val
    if args.reliable_loss:
        upd["reliable_loss"] = args.reliable_loss
    if args.ambiguous_loss:
        upd["ambiguous_loss"] = args.ambiguous_loss
    if args.deterministic:
        upd["deterministic"] = True
    if args.k is not None:
        if args.k < 1:
            raise ConfigError("--k must be >= 1")
        upd["augment"] = _with_k(train.augment, args.k)
    return dataclasses.replace(train, **upd)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train = _train_overrides(cfg.train, args)
    cfg = dataclasses.replace(cfg, train=train).validate()
    if not Path(args.manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    metrics = run_training(train, args.manifest, out)
    rows = read_metrics(metrics)
    evals = [r for r in rows if r["miou"] is not None]
    _out(f"metrics {metrics}")
    _out(f"checkpoint {out / 'checkpoint.bin'}")
    if evals:
        _out(f"final mIoU {evals[-1]['miou']:.6f} at step {int(evals[-1]['step'])}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    cfg = params.config
    scenes = load_scenes(args.manifest, cfg.k, None if args.split == "all" else args.split)
    if not scenes:
        raise ConfigError(f"{args.manifest}: no scenes in split {args.split!r}")
    for s in scenes:
        if s.x.shape[1] != cfg.in_dim:
            raise ConfigError(f"scene {s.name} has {s.x.shape[1]} input columns, checkpoint expects {cfg.in_dim}")
        if s.truth is None:
            raise ConfigError(f"scene {s.name} has no dense ground truth")
        if s.truth.class_per_point.max() >= cfg.n_classes:
            raise ConfigError(f"scene {s.name} uses classes beyond the checkpoint's {cfg.n_classes}")
    miou, per_class = evaluate(params, scenes)
    _out(f"mIoU {miou:.6f}")
    for c, iou in enumerate(per_class):
        _out(f"class {c} IoU {'absent' if math.isnan(iou) else f'{iou:.6f}'}")
    if args.dump_masks:
        _dump_masks(params, scenes, args)
    return 0


def _dump_masks(params, scenes, args):
    """Per-point ``reliable pseudo_label`` lines for each scene."""
    train = load_config(args.config).train if args.config else TrainConfig()
    train = dataclasses.replace(
        train,
        tau=args.tau if args.tau is not None else train.tau,
        kappa=args.kappa if args.kappa is not None else train.kappa,
    )
    train.validate()
    out = Path(args.dump_masks)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(train.seed)
    for scene, srng in zip(scenes, rng.spawn(len(scenes))):
        _, _, part, _, _ = scene_gradients(params, scene, train, srng)
        lines = [f"{int(m)} {int(l)}" for m, l in zip(part.mask, part.labels)]
        (out / f"{scene.name}.mask").write_text("\n".join(lines) + "\n")
    _out(f"masks written to {out}")


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------


def cmd_augment(args) -> int:
    cloud, labels = load_cloud(args.input)
    rng = np.random.default_rng(args.seed)
    if args.method == "affine":
        angle = args.angle % (2 * math.pi)
        result = affine_transform(cloud, AffineParams(angle, args.scale, tuple(args.translate)))
    elif args.method == "noise":
        result = pointwise_noise(cloud, NoiseParams(args.sigma, args.clip), rng)
    elif args.method == "pointwolf":
        result = pointwolf_deform(cloud, PointWolfParams(n_anchors=args.anchors), rng)
    else:
        if not args.second:
            raise UsageError("mix needs --second")
        other, _ = load_cloud(args.second)
        if args.alpha_const is not None and not 0 <= args.alpha_const <= 1:
            raise UsageError("--alpha-const must lie in [0, 1]")
        result = mix_augment(cloud, other, rng, alpha=args.alpha_const).cloud
    save_cloud(result, labels, args.output)
    _out(f"wrote {args.output}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _run_name(path: Path, taken: set) -> str:
    name = path.parent.name or path.stem
    base, i = name, 2
    while name in taken:
        name = f"{base}_{i}"
        i += 1
    taken.add(name)
    return name


def _ablation_marks(path: Path):
    cfg_path = path.parent / "config.yaml"
    if not cfg_path.is_file():
        return None
    try:
        train = parse_config(cfg_path.read_text()).train
    except ConfigError:
        return None
    return tuple("x" if lam > 0 else "" for lam in train.lambdas)


def cmd_report(args) -> int:
    runs, taken = [], set()
    for p in map(Path, args.metrics):
        if not p.is_file():
            raise FileNotFoundError(f"metrics file not found: {p}")
        runs.append((_run_name(p, taken), p, read_metrics(p)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    # pseudo-label curves aligned by step
    per_run = []
    steps = set()
    for _, _, rows in runs:
        train_rows = {int(r["step"]): r for r in rows if r["seg"] is not None}
        per_run.append(train_rows)
        steps.update(train_rows)
    curves = out / "pseudo_labels.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"{n}_{c}" for n, _, _ in runs for c in ("pl_acc", "reliable_count")])
        for s in sorted(steps):
            row = [s]
            for tr in per_run:
                r = tr.get(s)
                row += ["", ""] if r is None else [repr(r["pl_acc"]), int(r["reliable_count"])]
            w.writerow(row)

    summary = out / "summary.csv"
    table = []
    for name, p, rows in runs:
        evals = [r for r in rows if r["miou"] is not None]
        last = evals[-1] if evals else None
        marks = _ablation_marks(p)
        table.append((name, marks, last))
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "L_r", "L_a", "L_mix", "step", "miou"])
        for name, marks, last in table:
            m = marks or ("?", "?", "?")
            w.writerow([name, *m, "" if last is None else int(last["step"]), "" if last is None else repr(last["miou"])])

    width = max(len(n) for n, _, _ in table)
    _out(f"{'run':<{width}}  L_r  L_a  L_mix  step    mIoU")
    for name, marks, last in table:
        m = marks or ("?", "?", "?")
        miou = "      -" if last is None else f"{last['miou']:.4f}"
        step = "-" if last is None else str(int(last["step"]))
        _out(f"{name:<{width}}  {m[0]:^3}  {m[1]:^3}  {m[2]:^5}  {step:>4}  {miou}")
    _out(f"curves {curves}")
    _out(f"summary {summary}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="racseg", description="Weakly supervised point-cloud segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("config")
    g.add_argument("out_dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("config")
    t.add_argument("manifest")
    t.add_argument("out_dir")
    t.add_argument("--tau", type=float)
    t.add_argument("--kappa", type=float)
    t.add_argument("--k", type=int, help="number of augmented views")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--lambda3", type=float)
    t.add_argument("--reliable-loss", choices=("ce", "dice"))
    t.add_argument("--ambiguous-loss", choices=("kl", "mse"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU of a checkpoint on a manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--dump-masks", metavar="DIR", help="write per-point reliable/pseudo-label files")
    e.add_argument("--config", help="run config for --dump-masks thresholds and augmentation")
    e.add_argument("--tau", type=float)
    e.add_argument("--kappa", type=float)
    e.add_argument("--deterministic", action="store_true", help="accepted for symmetry; eval is always deterministic")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment", help="apply one augmentation to a cloud file")
    a.add_argument("method", choices=("affine", "noise", "pointwolf", "mix"))
    a.add_argument("input")
    a.add_argument("output")
    a.add_argument("--angle", type=float, default=0.0, help="rotation about z, radians")
    a.add_argument("--scale", type=float, default=1.0)
    a.add_argument("--translate", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
    a.add_argument("--sigma", type=float, default=0.01)
    a.add_argument("--clip", type=float, default=0.05)
    a.add_argument("--anchors", type=int, default=4)
    a.add_argument("--second", help="second cloud for mix")
    a.add_argument("--alpha-const", type=float, help="use one alpha for every point")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--deterministic", action="store_true", help="accepted for symmetry; seeded ops are deterministic")
    a.set_defaults(func=cmd_augment)

    r = sub.add_parser("report", help="compare metrics files")
    r.add_argument("metrics", nargs="+")
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError, CloudParseError, EmptyInputError, ValueError) as exc:
        print(f"racseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"racseg {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
