#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Overlap metrics for binary masks and dataset-level evaluation reports. Dataset scores are means of per-sample scores,
reported in percent.
"""

import csv
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path

import numpy as np

from c2fvl import png
from c2fvl.errors import CorruptIndex, ShapeMismatch


logger = logging.getLogger(__name__)


def _binary_pair(pred, gt):

    pred, gt = np.asarray(pred) != 0, np.asarray(gt) != 0
    if pred.shape != gt.shape:
        raise ShapeMismatch("Prediction shape {} does not match ground-truth shape {}.".format(pred.shape, gt.shape))
    return pred, gt


def dice_score(pred, gt):
    """
    Dice coefficient `2|P ∩ G| / (|P| + |G|)` of two binary masks (nonzero is foreground); 1.0 if both are empty.
    """
    pred, gt = _binary_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou_score(pred, gt):
    """
    Intersection over union `|P ∩ G| / |P ∪ G|` of two binary masks; 1.0 if both are empty.
    """
    pred, gt = _binary_pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


@dataclass
class SampleScore:
    sample_id: str
    dice: float
    iou: float


@dataclass
class EvalReport:
    """
    Evaluation of a set of predicted masks.

    Attributes
    ----------
    dice, iou : float
        Mean per-sample scores, in percent.
    per_sample : list
        ``SampleScore`` entries (scores as fractions in [0, 1]).
    n_samples : int
        Number of evaluated samples.
    """
    dice: float
    iou: float
    per_sample: list = field(default_factory=list)
    n_samples: int = 0

    def to_dict(self):
        return {"dice": self.dice, "iou": self.iou, "n_samples": self.n_samples,
                "per_sample": [{"id": s.sample_id, "dice": s.dice, "iou": s.iou} for s in self.per_sample]}

    def to_json(self, path=None):
        """
        Serialize the report as JSON; write it to ``path`` if given. Returns the JSON string.
        """
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_csv(self, path):
        """
        Write the per-sample scores to a CSV file with the columns `id,dice,iou`, plus a final "mean" row (percent).
        """
        with open(str(path), "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id", "dice", "iou"])
            for s in self.per_sample:
                writer.writerow([s.sample_id, repr(s.dice), repr(s.iou)])
            writer.writerow(["mean", repr(self.dice), repr(self.iou)])


def evaluate_masks(pairs):
    """
    Score predicted masks against ground truth.

    Parameters
    ----------
    pairs : iterable
        `(sample_id, pred, gt)` triples of binary masks.

    Returns
    -------
    EvalReport
        Mean scores in percent; both means are 0 for an empty input.
    """
    scores = [SampleScore(sample_id, dice_score(pred, gt), iou_score(pred, gt)) for sample_id, pred, gt in pairs]
    if not scores:
        return EvalReport(dice=0.0, iou=0.0, per_sample=[], n_samples=0)
    dice = 100.0 * float(np.mean([s.dice for s in scores]))
    iou = 100.0 * float(np.mean([s.iou for s in scores]))
    return EvalReport(dice=dice, iou=iou, per_sample=scores, n_samples=len(scores))


def evaluate_directories(pred_dir, gt_dir, verbose=False):
    """
    Score every mask PNG in ``gt_dir`` against the file of the same name in ``pred_dir``.

    Raises
    ------
    CorruptIndex
        If a prediction is missing, or there are no ground-truth masks.
    IOError
        If a file cannot be read.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gt_paths = sorted(gt_dir.glob("*.png"))
    if not gt_paths:
        raise CorruptIndex("No mask files in {}.".format(gt_dir))
    pairs = []
    for gt_path in gt_paths:
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise CorruptIndex("Missing prediction for {!r}: {}".format(gt_path.stem, pred_path))
        pairs.append((gt_path.stem, png.open_mask(pred_path, verbose), png.open_mask(gt_path, verbose)))
    report = evaluate_masks(pairs)
    logger.info("Evaluated %d masks: dice %.2f%%, iou %.2f%%", report.n_samples, report.dice, report.iou)
    return report
