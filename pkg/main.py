#!/usr/bin/env python
"""
Main entry point for the attention-guided mitotic figure detector.

Commands:
    gen-synth         render the synthetic train / val / test datasets
    train-detector    train the FCOS detector
    train-classifier  train the FAL-CNN mini-patch classifier
    train-fusion      train the fusion network with both upstream stages frozen
    evaluate          F1 of the composite model (optionally next to the bare detector)
    infer             write detections for PNG images or a dataset split
    export-attention  save patch / attention heatmap panels
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from config import config_hash, load_config
from dataset import (DetectionDataset, ImageRecord, build_balanced_patchset, generate_synthetic_splits,
                     read_png, split_patchset)
from detector import FcosDetector, train_detector
from errors import DatasetError, MitosisError, OutputError, PrerequisiteError
from evaluation import OracleDetector, evaluate_dataset
from falcnn import FalCnn, train_classifier
from fusion import FusionNet
from pipeline import CompositeModel, load_model, train_fusion_in_situ, write_manifest
from plots import plot_history, save_attention_panel

logger = logging.getLogger(__name__)


def display_banner(title):
    print("\n" + "=" * 60)
    print(f" {title} ".center(60, "="))
    print("=" * 60)


def print_summary(rows):
    print("\n" + "=" * 50)
    print(" RESULTS SUMMARY ".center(50, "="))
    print("=" * 50)
    for key, value in rows:
        print(f"{key + ':':<24}{value}")
    print("=" * 50)


def write_json(path, doc):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_run_record(directory, command, cfg):
    return write_json(os.path.join(directory, "run.json"), {
        "command": command,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
    })


def write_history(directory, history, title):
    os.makedirs(directory, exist_ok=True)
    history.to_csv(os.path.join(directory, "history.csv"), index=False, float_format="%.8g")
    if len(history):
        plot_history(history, os.path.join(directory, "history.png"), title)


def load_split(cfg, name):
    path = os.path.join(cfg.data_dir, f"{name}.json")
    if not os.path.isfile(path):
        raise DatasetError(f"dataset split not found: {path} (run gen-synth or pass --data)")
    return DetectionDataset.from_file(path)


def stage_dir(cfg, stage):
    return os.path.join(cfg.out_dir, stage)


def require_checkpoint(cfg, stage, command):
    directory = stage_dir(cfg, stage)
    if not os.path.isfile(os.path.join(directory, "meta.json")):
        raise PrerequisiteError(f"{command} needs a trained {stage} checkpoint in {directory} (run train-{stage})")
    return directory


# -- commands -------------------------------------------------------------------


def cmd_gen_synth(args, cfg):
    synthetic = cfg.synthetic
    if args.size is not None:
        synthetic = replace(synthetic, image_size=args.size)
    if args.count is not None:
        synthetic = replace(synthetic, image_count=args.count)
    cfg = replace(cfg, synthetic=synthetic)

    splits = generate_synthetic_splits(synthetic, cfg.seed)
    try:
        for name, ds in splits.items():
            ds.save(cfg.data_dir, f"{name}.json")
        write_run_record(cfg.data_dir, "gen-synth", cfg)
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {cfg.data_dir}: {e}") from e
    print_summary([(f"{name} images", len(ds)) for name, ds in splits.items()] + [("written to", cfg.data_dir)])


def cmd_train_detector(args, cfg):
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    detector, history, best = train_detector(train, val, cfg.detector, cfg.detector_schedule, seed=cfg.seed,
                                             radius_px=cfg.evaluation.radius_px)
    directory = stage_dir(cfg, "detector")
    detector.save(directory, seed=cfg.seed, config_hash=config_hash(cfg), **best)
    write_history(directory, history, "Detector training")
    write_run_record(directory, "train-detector", cfg)
    print_summary([("best epoch", best["epoch"]), ("validation F1", f"{best['validation_f1']:.4f}"),
                   ("checkpoint", directory)])


def cmd_train_classifier(args, cfg):
    train = load_split(cfg, "train")
    patches = build_balanced_patchset(train.images, train.annotations, cfg.negatives_per_positive, seed=cfg.seed)
    train_p, test_p, val_p = split_patchset(patches, cfg.patch_split)
    logger.info("patch split: %d train, %d validation, %d test", len(train_p), len(val_p), len(test_p))
    model, history, best = train_classifier(train_p, val_p, test_p, cfg.classifier, cfg.classifier_schedule,
                                            seed=cfg.seed)
    directory = stage_dir(cfg, "classifier")
    model.save(directory, seed=cfg.seed, config_hash=config_hash(cfg), **best)
    write_history(directory, history, "Classifier training")
    write_run_record(directory, "train-classifier", cfg)
    print_summary([("best epoch", best["epoch"]), ("validation accuracy", f"{best['validation_accuracy']:.4f}"),
                   ("test accuracy", f"{best['test_accuracy']:.4f}"), ("checkpoint", directory)])


def cmd_train_fusion(args, cfg):
    detector_dir = require_checkpoint(cfg, "detector", "train-fusion")
    classifier_dir = require_checkpoint(cfg, "classifier", "train-fusion")
    detector, detector_meta = FcosDetector.load(detector_dir)
    classifier, classifier_meta = FalCnn.load(classifier_dir)
    model = CompositeModel(detector, classifier, FusionNet.initialize(cfg.seed), cfg.fusion)

    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    fusion, history, best = train_fusion_in_situ(model, train, val, cfg.fusion_schedule, seed=cfg.seed)

    directory = stage_dir(cfg, "fusion")
    h = config_hash(cfg)
    fusion.save(directory, seed=cfg.seed, config_hash=h, epoch=best["epoch"], validation_f1=best["validation_f1"],
                initial_validation_f1=best["initial_validation_f1"], **{"lambda": cfg.fusion.loss_lambda,
                                                                       "radius": cfg.fusion.radius_px,
                                                                       "offset_range": cfg.fusion.offset_range})
    write_manifest(cfg.out_dir, {"detector": detector_meta.get("config_hash"),
                                 "classifier": classifier_meta.get("config_hash"), "fusion": h}, cfg.seed)
    write_history(directory, history, "Fusion training")
    write_run_record(directory, "train-fusion", cfg)
    print_summary([("identity validation F1", f"{best['initial_validation_f1']:.4f}"),
                   ("best validation F1", f"{best['validation_f1']:.4f}"), ("best epoch", best["epoch"]),
                   ("composite model", cfg.out_dir)])


def cmd_evaluate(args, cfg):
    dataset = load_split(cfg, args.split)
    baseline = None
    if args.oracle:
        model, name = OracleDetector(dataset, cfg.evaluation.oracle_box_size), "oracle"
    else:
        model, name = load_model(cfg.out_dir), "composite"
        if args.baseline:
            baseline = model.detector
    report = evaluate_dataset(model, dataset, cfg.evaluation.radius_px, name=name, baseline=baseline,
                              config={"split": args.split, "seed": cfg.seed, "config_hash": config_hash(cfg)})
    directory = os.path.join(cfg.out_dir, "eval")
    csv_path, json_path = report.write(directory)
    write_run_record(directory, "evaluate", cfg)
    rows = []
    for label, s in report.summaries.items():
        rows.append((f"{label} F1", f"{s['f1']:.4f} (tp={s['tp']} fp={s['fp']} fn={s['fn']})"))
    print_summary(rows + [("metrics", json_path)])


def _infer_images(args, cfg):
    if not args.images:
        return load_split(cfg, args.split).images
    images = []
    for i, path in enumerate(args.images):
        if not os.path.isfile(path):
            raise DatasetError(f"image not found: {path}")
        pixels = read_png(path)
        images.append(ImageRecord(i, path, pixels.shape[1], pixels.shape[0], pixels))
    return images


def cmd_infer(args, cfg):
    model = load_model(cfg.out_dir)
    predictor = model.detector if args.baseline else model
    results = []
    for image in _infer_images(args, cfg):
        dets = predictor.predict(image)
        results.append({
            "image": image.file,
            "detections": [{"x1": float(d.box.x1), "y1": float(d.box.y1), "x2": float(d.box.x2),
                            "y2": float(d.box.y2), "class_id": int(d.class_id), "score": float(d.score)}
                           for d in dets],
        })
    directory = os.path.join(cfg.out_dir, "infer")
    path = write_json(os.path.join(directory, "detections.json"),
                      {"model": "baseline" if args.baseline else "composite", "seed": cfg.seed,
                       "config_hash": config_hash(cfg), "results": results})
    write_run_record(directory, "infer", cfg)
    print_summary([("images", len(results)), ("detections", sum(len(r["detections"]) for r in results)),
                   ("written to", path)])


def cmd_export_attention(args, cfg):
    classifier, _ = FalCnn.load(stage_dir(cfg, "classifier"))
    dataset = load_split(cfg, args.split)
    patches = build_balanced_patchset(dataset.images, dataset.annotations, cfg.negatives_per_positive, seed=cfg.seed)
    directory = os.path.join(cfg.out_dir, "attention")
    written = []
    for patch_id in args.ids:
        if not 0 <= patch_id < len(patches):
            raise DatasetError(f"unknown patch id {patch_id} ({args.split} split has {len(patches)} patches)")
        patch = patches.patches[patch_id]
        out = classifier.classify(patch.pixels[None])
        path = os.path.join(directory, f"patch_{patch_id:05d}.png")
        save_attention_panel(path, patch.pixels, out.attention[0])
        logger.info("patch %d (image %d, label %d): p_mitosis=%.4f", patch_id, patch.source_image_id,
                    patch.label, out.p_mitosis[0])
        written.append(path)
    write_run_record(directory, "export-attention", cfg)
    print_summary([("panels", len(written)), ("written to", directory)])


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-detector": cmd_train_detector,
    "train-classifier": cmd_train_classifier,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "export-attention": cmd_export_attention,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config merged over the preset")
    common.add_argument("--seed", type=int, help="random seed (default from preset: 7)")
    common.add_argument("--out", help="output directory (the dataset directory for gen-synth)")
    common.add_argument("--data", help="dataset directory holding train/val/test.json")
    common.add_argument("--preset", choices=["desk", "paper"], default="desk", help="hyperparameter preset")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(description="Attention-guided mitotic figure detection")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Command to run")

    gen = subparsers.add_parser("gen-synth", parents=[common], help="Render the synthetic datasets")
    gen.add_argument("--size", type=int, help="image side length in pixels (>= 112)")
    gen.add_argument("--count", type=int, help="number of training images")

    subparsers.add_parser("train-detector", parents=[common], help="Train the FCOS detector")
    subparsers.add_parser("train-classifier", parents=[common], help="Train the FAL-CNN classifier")
    subparsers.add_parser("train-fusion", parents=[common], help="Train the fusion network in situ")

    ev = subparsers.add_parser("evaluate", parents=[common], help="Score a model on a dataset split")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--baseline", action="store_true", help="also score the bare detector")
    ev.add_argument("--oracle", action="store_true", help="score the ground-truth oracle instead of a model")

    inf = subparsers.add_parser("infer", parents=[common], help="Write detections as JSON")
    inf.add_argument("images", nargs="*", help="PNG files (default: the chosen split)")
    inf.add_argument("--split", default="test", choices=["train", "val", "test"])
    inf.add_argument("--baseline", action="store_true", help="use the bare detector")

    exp = subparsers.add_parser("export-attention", parents=[common], help="Save attention heatmap panels")
    exp.add_argument("--ids", type=int, nargs="+", required=True, help="patch ids within the split's patch set")
    exp.add_argument("--split", default="test", choices=["train", "val", "test"])
    return parser


def main(argv: Optional[List[str]] = None):
    """Run one command; returns the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-synth" and args.size is not None and args.size < 112:
        parser.error(f"--size must be at least 112, got {args.size}")

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-synth":
            cfg = load_config(args.config, args.preset, args.seed, data_dir=args.out or args.data)
        else:
            cfg = load_config(args.config, args.preset, args.seed, out_dir=args.out, data_dir=args.data)
        display_banner(f"{args.command} ({cfg.preset} preset, seed {cfg.seed})")
        COMMANDS[args.command](args, cfg)
    except OSError as e:
        print(OutputError(str(e)).one_line(), file=sys.stderr)
        return 1
    except MitosisError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
