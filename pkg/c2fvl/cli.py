#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Command line interface: ``c2fvl <command> ...`` with the commands gen-data, encode-text, train, eval, predict,
saliency and sweep.

Exit codes: 0 success, 1 other c2fvl error, 2 configuration error, 3 non-finite loss, 4 data error.
"""

import argparse
import json
import logging
from pathlib import Path
import sys

import numpy as np

from c2fvl import __version__, png
from c2fvl.checkpoint import load_checkpoint, restore, save_checkpoint
from c2fvl.config import RunConfig, load_run_config, parse_overrides
from c2fvl.errors import C2fvlError, ConfigError, CorruptIndex, DataShapeError, NonFiniteLoss, ReportError
from c2fvl.metrics import evaluate_directories
from c2fvl.model import C2fvlNet
from c2fvl.report_codec import read_reports, report_to_vector
from c2fvl.saliency import grad_cam_all, validate_stage
from c2fvl.synth_data import Dataset, Sample, SyntheticSpec, load_dataset, split_sizes, write_dataset
from c2fvl.sweep import MAX_CELLS, parse_grid, run_sweep, write_results
from c2fvl.training import evaluate, predict_masks, train_run, write_history
from c2fvl.zones import CONVENTIONS


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NON_FINITE = 3
EXIT_DATA = 4

CHECKPOINT_FILE = "checkpoint.c2fvl"
HISTORY_FILE = "history.csv"
CONFIG_FILE = "config.txt"
EVAL_FILE = "eval.json"


def _emit(payload):

    sys.stdout.write(json.dumps(payload, separators=(",", ":"), sort_keys=True) + "\n")


def _no_overrides(extra):

    if extra:
        raise ConfigError("Unrecognized arguments: {}".format(" ".join(extra)))


def model_from_checkpoint(path, verbose=False):
    """
    Rebuild the model stored in a checkpoint file; return `(model, run config)` with the model in eval mode.
    """
    checkpoint = load_checkpoint(path, verbose)
    cfg = RunConfig.from_dict(checkpoint.config)
    model = C2fvlNet(cfg.model)
    restore(checkpoint, model)
    model.eval()
    return model, cfg


def _select(dataset, split):

    return dataset if split == "all" else dataset.subset(split)


def cmd_gen_data(args, extra):
    _no_overrides(extra)
    if args.total is not None:
        try:
            counts = split_sizes(args.total, [float(r) for r in args.ratios.split(",")]) + [0, 0]
        except ValueError as e:
            raise ConfigError("Invalid split: {}".format(e))
        n_train, n_val, n_test = counts[:3]
    else:
        n_train, n_val, n_test = args.train, args.val, args.test
    spec = SyntheticSpec(image_size=args.size, count_range=(args.min_lesions, args.max_lesions), seed=args.seed,
                         convention=args.convention, ambiguous=args.ambiguous)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError("Invalid generator settings: {}".format(e))
    dataset = write_dataset(args.out, n_train, n_val, n_test, spec, verbose=args.verbose > 0)
    logger.info("Wrote %d samples to %s", len(dataset), args.out)
    _emit({"train": n_train, "val": n_val, "test": n_test, "dir": str(args.out)})
    return EXIT_OK


def cmd_encode_text(args, extra):
    _no_overrides(extra)
    if args.report is not None:
        sys.stdout.write(json.dumps(report_to_vector(args.report).tolist(), separators=(",", ":")) + "\n")
    else:
        reports = read_reports(args.reports)
        _emit({image_id: report_to_vector(report).tolist() for image_id, report in reports.items()})
    return EXIT_OK


def cmd_train(args, extra):
    cfg = load_run_config(args.config, parse_overrides(extra))
    dataset = load_dataset(cfg.data.dataset, convention=cfg.data.convention, verbose=args.verbose > 1)
    out = Path(cfg.data.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.dumps(), encoding="utf-8")
    logger.info("Training config %s on %s", cfg.fingerprint(), cfg.data.dataset)

    model, checkpoint, history = train_run(cfg, dataset, verbose=args.verbose > 0)
    save_checkpoint(out / CHECKPOINT_FILE, checkpoint)
    write_history(out / HISTORY_FILE, history)
    summary = {"rounds": len(history), "best_round": checkpoint.round, "fingerprint": cfg.fingerprint(),
               "checkpoint": str(out / CHECKPOINT_FILE)}
    val_set = dataset.subset("val")
    if len(val_set):
        report = evaluate(model, val_set, cfg.train.threshold)
        report.to_json(out / EVAL_FILE)
        summary.update(val_dice=report.dice, val_iou=report.iou)
    _emit(summary)
    return EXIT_OK


def cmd_eval(args, extra):
    _no_overrides(extra)
    if args.pred is not None or args.gt is not None:
        if args.pred is None or args.gt is None:
            raise ConfigError("--pred and --gt must be given together.")
        report = evaluate_directories(args.pred, args.gt, verbose=args.verbose > 1)
    elif args.checkpoint is not None and args.dataset is not None:
        model, cfg = model_from_checkpoint(args.checkpoint, verbose=args.verbose > 0)
        dataset = _select(load_dataset(args.dataset, convention=cfg.data.convention), args.split)
        report = evaluate(model, dataset, cfg.train.threshold)
    else:
        raise ConfigError("Either --pred and --gt, or --checkpoint and --dataset are needed.")
    if args.json is not None:
        report.to_json(args.json)
    if args.csv is not None:
        report.to_csv(args.csv)
    _emit({"dice": report.dice, "iou": report.iou, "n_samples": report.n_samples})
    return EXIT_OK


def _single_sample(image_path, report):

    image = png.open_image(image_path)
    vector = report_to_vector(report)
    mask = np.zeros(image.shape, dtype=np.uint8)
    return Sample(sample_id=Path(image_path).stem, image=image, mask=mask, report=report, vector=vector)


def cmd_predict(args, extra):
    _no_overrides(extra)
    model, cfg = model_from_checkpoint(args.checkpoint, verbose=args.verbose > 0)
    if args.image is not None:
        if args.report is None:
            raise ConfigError("--image needs --report.")
        dataset = Dataset([_single_sample(args.image, args.report)])
    elif args.dataset is not None:
        dataset = _select(load_dataset(args.dataset, convention=cfg.data.convention), args.split)
    else:
        raise ConfigError("Either --image and --report, or --dataset are needed.")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample, mask in zip(dataset, predict_masks(model, dataset, cfg.train.threshold)):
        png.save_mask(out / "{}.png".format(sample.sample_id), mask)
    logger.info("Wrote %d masks to %s", len(dataset), out)
    _emit({"n_samples": len(dataset), "dir": str(out)})
    return EXIT_OK


def cmd_saliency(args, extra):
    _no_overrides(extra)
    model, cfg = model_from_checkpoint(args.checkpoint, verbose=args.verbose > 0)
    sample = _single_sample(args.image, args.report)
    stage = model.num_stages if args.stage is None else args.stage
    validate_stage(model, stage)
    maps = grad_cam_all(model, sample.image, sample.vector)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in maps:
        png.save_heatmap(out / "stage_{}.png".format(m.stage), m.heatmap, shape=sample.image.shape)
    chosen = next(m for m in maps if m.stage == stage)
    png.save_overlay(out / "overlay_stage_{}.png".format(stage), sample.image, chosen.heatmap, alpha=args.alpha)
    _emit({"stages": [m.stage for m in maps], "zero": [m.is_zero for m in maps], "dir": str(out)})
    return EXIT_OK


def cmd_sweep(args, extra):
    cfg = load_run_config(args.config, parse_overrides(extra))
    axes = parse_grid(args.grid)
    rows = run_sweep(cfg, axes, workers=args.workers, max_cells=args.max_cells, verbose=args.verbose > 0)
    write_results(args.out, axes, rows)
    logger.info("Wrote %d sweep results to %s", len(rows), args.out)
    _emit({"cells": len(rows), "results": str(args.out)})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="c2fvl", description="Text-guided lesion segmentation.",
                                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version="%(prog)s {}".format(__version__))
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more output (repeat for debug)")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="generate a synthetic dataset", allow_abbrev=False)
    p.add_argument("out", help="target directory")
    p.add_argument("--train", type=int, default=800)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--total", type=int, help="split this many samples by --ratios instead")
    p.add_argument("--ratios", default="4,1", help="train,val[,test] ratios for --total (default: 4,1)")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-lesions", type=int, default=1)
    p.add_argument("--max-lesions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--convention", choices=CONVENTIONS, default="radiological")
    p.add_argument("--ambiguous", action="store_true", help="unilateral lesions with mirrored decoys")
    p.set_defaults(func=cmd_gen_data)

    p = commands.add_parser("encode-text", help="print the text vector of a report", allow_abbrev=False)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--report", help="report text")
    group.add_argument("--reports", help="report index file (TSV)")
    p.set_defaults(func=cmd_encode_text)

    p = commands.add_parser("train", help="train a model (accepts --section.key value overrides)",
                            allow_abbrev=False)
    p.add_argument("--config", help="config file")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="score predicted masks", allow_abbrev=False)
    p.add_argument("--pred", help="directory of predicted masks")
    p.add_argument("--gt", help="directory of ground-truth masks")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", default="val", help="train, val, test, or all (default: val)")
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--csv", help="write per-sample scores as CSV")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("predict", help="predict masks", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", default="test", help="train, val, test, or all (default: test)")
    p.add_argument("--image", help="single image PNG")
    p.add_argument("--report", help="report of the single image")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("saliency", help="Grad-CAM maps of the decoder stages", allow_abbrev=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--stage", type=int, help="decoder stage of the overlay (default: deepest)")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_saliency)

    p = commands.add_parser("sweep", help="train over a parameter grid (accepts --section.key value overrides)",
                            allow_abbrev=False)
    p.add_argument("--config", help="config file")
    p.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2,...", help="grid axis (repeatable)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-cells", type=int, default=MAX_CELLS)
    p.add_argument("--out", default="sweep.csv", help="results CSV")
    p.set_defaults(func=cmd_sweep)
    return parser


def configure_logging(verbose, quiet):
    level = logging.WARNING if quiet else (logging.DEBUG if verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None):
    """
    Run the command line interface; return the exit code.
    """
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args, extra)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except NonFiniteLoss as e:
        logger.error("Training aborted: %s", e)
        return EXIT_NON_FINITE
    except (CorruptIndex, DataShapeError, ReportError, IOError) as e:
        logger.error("Data error: %s", e)
        return EXIT_DATA
    except C2fvlError as e:
        logger.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
