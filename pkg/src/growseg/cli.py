"""Command-line surface: synth, preprocess, train, segment, eval, baseline.

Exit codes: 0 success, 2 usage error, 1 runtime failure (message on
stderr). Every output file is deterministic given the inputs and --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import io as gio
from .geometry import voxel_downsample
from .pipeline import (
    TrainConfig,
    evaluate,
    fit_test_classifier,
    load_model,
    prepare_scene,
    save_model,
    segment,
    train,
    vanilla_kmeans_baseline,
)
from .superpoints import initial_superpoints
from .synthetic import SynthSpec, gen_synthetic


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="growseg",
        description="unsupervised point-cloud semantic segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic room dataset")
    p.add_argument("--spec", help="key = value spec file (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("preprocess",
                       help="voxel-downsample and build initial superpoints")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--mode", choices=("indoor", "outdoor"), default="indoor")
    p.add_argument("--voxel", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run the progressive-growing trainer")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key = value overrides for TrainConfig")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("segment", help="label scenes with a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="train output directory")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", help="also write the report to this file")

    p = sub.add_parser("baseline", help="vanilla K-means on xyzrgb")
    p.add_argument("--data", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _eval_split(records: list) -> list:
    """Held-out scenes when the manifest has them, otherwise everything."""
    test = [r for r in records if r.split == "test"]
    return test if test else records


def _scene_labels(record: gio.SceneRecord) -> np.ndarray:
    cloud, _ = gio.load_scene(record)
    if cloud.gt_labels is None:
        raise gio.ParseError(f"{record.cloud_path}: no labels found")
    return cloud.gt_labels


def _cmd_synth(args) -> int:
    spec = SynthSpec(seed=args.seed)
    if args.spec:
        raw = gio.parse_kv(args.spec)
        spec = SynthSpec.from_file(args.spec)
        if "seed" not in raw:
            spec = dataclasses.replace(spec, seed=args.seed)
    records = gen_synthetic(spec, args.out)
    print(f"wrote {len(records)} scenes to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    records = gio.read_manifest(args.in_dir)
    os.makedirs(args.out, exist_ok=True)
    out_records = []
    for record in records:
        cloud, _ = gio.load_scene(record)
        vox, _ = voxel_downsample(cloud, args.voxel)
        part = initial_superpoints(vox, mode=args.mode, voxel_res=args.voxel,
                                   rng_seed=args.seed)
        path = os.path.join(args.out, os.path.basename(record.cloud_path))
        stem = os.path.splitext(path)[0]
        gio.write_ply(path, vox, binary=True, labels=None)
        if vox.gt_labels is not None:
            gio.write_int_lines(stem + gio.LABELS_SUFFIX, vox.gt_labels)
        gio.write_int_lines(stem + gio.SUPERPOINTS_SUFFIX, part.assignment)
        out_records.append(gio.scene_record(path, record.split))
        print(f"{record.name}: {len(cloud)} -> {len(vox)} points, "
              f"{part.count} superpoints")
    gio.write_manifest(args.out, out_records)
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig(seed=args.seed)
    if args.config:
        raw = gio.parse_kv(args.config)
        values = gio.coerce_kv(raw, TrainConfig._FIELD_TYPES)
        if "seed" not in values:
            values["seed"] = args.seed
        config = TrainConfig(**values)
    records = [r for r in gio.read_manifest(args.data) if r.split == "train"]
    if not records:
        raise gio.ParseError(f"{args.data}: no training scenes in manifest")
    scenes = []
    for record in records:
        cloud, part = gio.load_scene(record)
        scenes.append(prepare_scene(cloud, part, config))
    print(f"training: M1={config.m1} MT={config.mt} S={config.s} "
          f"E_hat={config.epochs_per_round} E={config.total_epochs} "
          f"K={config.feature_dim} scenes={len(scenes)}")
    params, primitives, log = train(scenes, config, out_dir=args.out,
                                    workers=args.workers)
    save_model(os.path.join(args.out, "model.ckpt"), params, primitives,
               config)
    print(f"final loss {log[-1]['loss']!r} after {len(log)} epochs; "
          f"model in {args.out}")
    return 0


def _cmd_segment(args) -> int:
    model_path = os.path.join(args.model, "model.ckpt")
    params, primitives, config = load_model(model_path)
    if primitives is None:
        raise gio.ParseError(f"{model_path}: no primitive centroids stored")
    centroids = fit_test_classifier(primitives, args.classes, seed=args.seed)
    records = _eval_split(gio.read_manifest(args.data))
    os.makedirs(args.out, exist_ok=True)
    out_records = []
    for record in records:
        cloud, _ = gio.load_scene(record)
        pred = segment(params, cloud, centroids, voxel=config.voxel,
                       radius=config.radius)
        path = os.path.join(args.out, os.path.basename(record.cloud_path))
        gio.write_ply(path, cloud, binary=True, labels=pred)
        out_records.append(gio.SceneRecord(cloud_path=path,
                                           split=record.split))
        print(f"{record.name}: {len(pred)} points labeled")
    gio.write_manifest(args.out, out_records)
    return 0


def _cmd_eval(args) -> int:
    pred_records = gio.read_manifest(args.pred)
    gt_by_name = {r.name: r for r in gio.read_manifest(args.gt)}
    preds, gts = [], []
    for record in pred_records:
        if record.name not in gt_by_name:
            raise gio.ParseError(
                f"{record.cloud_path}: no matching scene in {args.gt}")
        pred = _scene_labels(record)
        gt = _scene_labels(gt_by_name[record.name])
        if len(pred) != len(gt):
            raise gio.ParseError(
                f"{record.name}: {len(pred)} predictions vs {len(gt)} labels")
        preds.append(pred)
        gts.append(gt)
    result = evaluate(preds, gts, args.classes)
    entries = {"scenes": len(preds), "classes": args.classes,
               "oa": result.oa, "macc": result.macc, "miou": result.miou}
    for k, iou in enumerate(result.iou):
        entries[f"iou_{k}"] = float(iou)
    text = gio.format_report(entries)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(text.encode("ascii"))
    return 0


def _cmd_baseline(args) -> int:
    records = _eval_split(gio.read_manifest(args.data))
    preds, gts = [], []
    for record in records:
        cloud, _ = gio.load_scene(record)
        if cloud.gt_labels is None:
            raise gio.ParseError(f"{record.cloud_path}: no labels found")
        preds.append(vanilla_kmeans_baseline(cloud, args.classes,
                                             seed=args.seed))
        gts.append(cloud.gt_labels)
    result = evaluate(preds, gts, args.classes)
    entries = {"scenes": len(preds), "classes": args.classes,
               "oa": result.oa, "macc": result.macc, "miou": result.miou}
    for k, iou in enumerate(result.iou):
        entries[f"iou_{k}"] = float(iou)
    sys.stdout.write(gio.format_report(entries))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "segment": _cmd_segment,
    "eval": _cmd_eval,
    "baseline": _cmd_baseline,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (gio.ParseError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
