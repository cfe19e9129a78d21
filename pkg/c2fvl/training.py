#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Optimization of a ``C2fvlNet`` with Adam on the composite loss, periodic validation with early stopping on the
validation Dice, and deterministic evaluation.

One round is one optimization step on one batch. Batches are drawn from a seeded stream of shuffled passes over the
training set, so every batch is full (samples repeat within a batch if the training set is smaller than the batch).
"""

import csv
from dataclasses import dataclass, field
import logging

import numpy as np
import torch
from tqdm import tqdm

from c2fvl.checkpoint import Checkpoint, restore
from c2fvl.decoder import logits_to_mask
from c2fvl.errors import DataShapeError, NonFiniteLoss
from c2fvl.losses import LossConfig, total_loss
from c2fvl.metrics import evaluate_masks
from c2fvl.model import C2fvlNet


logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("round", "loss_total", "loss_dice", "loss_ce", "cos1", "cos2", "cos3", "val_dice", "val_iou")


@dataclass
class TrainConfig:
    """
    Parameters
    ----------
    learning_rate : float
        Adam step size (default: 1e-3).
    batch_size : int
        Samples per round (default: 4).
    max_rounds : int
        Maximal number of optimization rounds (default: 2000).
    early_stop_patience : int
        Stop after this many evaluations without a new best validation Dice (default: 50).
    seed : int
        Seed of batch sampling (and, in the CLI, of parameter initialization).
    eval_every : int
        Rounds between evaluations on the validation set (default: 50).
    threshold : float
        Probability threshold of predicted masks.
    loss : LossConfig
        Loss coefficients and variant.
    """
    learning_rate: float = 1e-3
    batch_size: int = 4
    max_rounds: int = 2000
    early_stop_patience: int = 50
    seed: int = 0
    eval_every: int = 50
    threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        if self.learning_rate < 0:
            raise ValueError("The learning rate must not be negative: {}".format(self.learning_rate))
        for name in ("batch_size", "max_rounds", "early_stop_patience", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError("{} must be positive, not {}.".format(name, getattr(self, name)))
        if not 0 < self.threshold < 1:
            raise ValueError("Threshold must be in (0, 1), not {}.".format(self.threshold))
        self.loss.validate()


class BatchStream:
    """
    Endless seeded stream of sample indices, one shuffled pass after the other, cut into batches.
    """

    def __init__(self, n_samples, batch_size, seed):
        if n_samples <= 0:
            raise DataShapeError("Cannot draw batches from an empty dataset.")
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.pending = []

    def next_batch(self):
        while len(self.pending) < self.batch_size:
            self.pending += self.rng.permutation(self.n_samples).tolist()
        batch, self.pending = self.pending[:self.batch_size], self.pending[self.batch_size:]
        return batch


def model_dtype(model):
    return next(model.parameters()).dtype


def check_data(model, dataset):
    """
    Raise a ``DataShapeError`` if the dataset's images do not fit the model.
    """
    dataset.check_shapes(2 ** model.num_stages)
    size = dataset[0].image.shape[0]
    if size != model.cfg.image_size:
        raise DataShapeError("The model expects {0}×{0} images, the dataset has {1}×{1}.".format(
            model.cfg.image_size, size))


def to_tensors(dataset, indices, dtype):
    images, masks, vectors = dataset.arrays(indices)
    return (torch.as_tensor(images, dtype=dtype), torch.as_tensor(masks, dtype=dtype),
            torch.as_tensor(vectors, dtype=dtype))


def _check_finite(bundle, round_):

    for name, value in bundle.named_terms():
        if not torch.isfinite(value).all():
            raise NonFiniteLoss(name, round_)


def _check_gradients(model, round_):

    for name, parameter in model.named_parameters():
        if parameter.grad is not None and not torch.isfinite(parameter.grad).all():
            raise NonFiniteLoss("grad:{}".format(name), round_)


def predict_masks(model, dataset, threshold=0.5, batch_size=8):
    """
    Predict binary masks for all samples of a dataset in eval mode.

    Returns
    -------
    list
        2D uint8 arrays, in dataset order.
    """
    check_data(model, dataset)
    was_training = model.training
    model.eval()
    masks = []
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                indices = list(range(start, min(start + batch_size, len(dataset))))
                images, _, vectors = to_tensors(dataset, indices, model_dtype(model))
                predicted = logits_to_mask(model(images, vectors).logits, threshold)
                masks += [m[0].numpy() for m in predicted]
    finally:
        model.train(was_training)
    return masks


def evaluate(model, dataset, threshold=0.5):
    """
    Score the model's thresholded predictions on a dataset.

    Returns
    -------
    EvalReport
        Mean Dice and IoU in percent, and per-sample scores.

    Raises
    ------
    DataShapeError
        If the data does not fit the model.
    """
    predicted = predict_masks(model, dataset, threshold)
    return evaluate_masks((s.sample_id, p, s.mask) for s, p in zip(dataset, predicted))


def write_history(path, history):
    """
    Write the training history as CSV; rounds without evaluation have empty ``val_dice`` and ``val_iou`` fields.
    """
    with open(str(path), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({key: row.get(key, "") for key in HISTORY_COLUMNS})


def train(model, train_set, cfg=None, val_set=None, fingerprint="", config=None, verbose=False):
    """
    Train a model.

    Parameters
    ----------
    model : C2fvlNet
        The model; trained in place and finally set to the parameters of the returned checkpoint.
    train_set : Dataset
        Training samples.
    cfg : TrainConfig, optional
        Optimization settings (default: ``TrainConfig()``).
    val_set : Dataset, optional
        Validation samples. Without them, there is no early stopping and the final state is returned.
    fingerprint : str, optional
        Configuration fingerprint stored in the checkpoints.
    config : dict, optional
        Run configuration stored in the checkpoints.
    verbose : bool, optional
        If `True`, show a progress bar (default: `False`).

    Returns
    -------
    tuple
        `(checkpoint, history)`: the checkpoint with the best validation Dice (or the final state), and one dict per
        round with the keys of ``HISTORY_COLUMNS`` (validation Dice and IoU as fractions, in evaluation rounds only).

    Raises
    ------
    NonFiniteLoss
        If a loss term or a gradient is not finite; no parameter is updated in that round.
    DataShapeError
        If the data does not fit the model.
    """
    cfg = TrainConfig() if cfg is None else cfg
    cfg.validate()
    check_data(model, train_set)
    has_val = val_set is not None and len(val_set) > 0
    if has_val:
        check_data(model, val_set)

    dtype = model_dtype(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    stream = BatchStream(len(train_set), cfg.batch_size, cfg.seed)
    history = []
    best, best_dice, stale = None, -1.0, 0

    progress = tqdm(range(1, cfg.max_rounds + 1), desc="Training", disable=not verbose)
    for round_ in progress:
        model.train()
        images, masks, vectors = to_tensors(train_set, stream.next_batch(), dtype)
        output = model(images, vectors)
        bundle = total_loss(torch.sigmoid(output.logits), masks, output.vlab_outputs, cfg.loss)
        _check_finite(bundle, round_)
        optimizer.zero_grad()
        bundle.total.backward()
        _check_gradients(model, round_)
        optimizer.step()

        row = dict(round=round_, **bundle.as_floats())
        if has_val and (round_ % cfg.eval_every == 0 or round_ == cfg.max_rounds):
            report = evaluate(model, val_set, cfg.threshold)
            row["val_dice"], row["val_iou"] = report.dice / 100, report.iou / 100
            logger.info("Round %d: loss %.4f (dice %.4f, ce %.4f, cos %.4f/%.4f/%.4f), val dice %.4f, val iou %.4f",
                        round_, row["loss_total"], row["loss_dice"], row["loss_ce"], row["cos1"], row["cos2"],
                        row["cos3"], row["val_dice"], row["val_iou"])
            if row["val_dice"] > best_dice:
                best_dice, stale = row["val_dice"], 0
                best = Checkpoint.capture(model, optimizer, round_, best_dice, fingerprint, config)
            else:
                stale += 1
        history.append(row)
        if has_val and stale >= cfg.early_stop_patience:
            logger.info("Early stop at round %d: no improvement in %d evaluations (best val dice %.4f).", round_,
                        stale, best_dice)
            break
    progress.close()

    if best is None:
        best = Checkpoint.capture(model, optimizer, len(history), -1.0, fingerprint, config)
    else:
        restore(best, model)
    return best, history


def train_run(run_cfg, dataset, verbose=False):
    """
    Build a model from a run configuration and train it on a dataset's "train" samples, validating on its "val"
    samples. A dataset without split prefixes is used for training as a whole.

    Parameters
    ----------
    run_cfg : RunConfig
        Model, optimization and loss settings; ``train.seed`` seeds the parameter initialization too.
    dataset : Dataset
        The samples.
    verbose : bool, optional
        If `True`, show a progress bar (default: `False`).

    Returns
    -------
    tuple
        `(model, checkpoint, history)`, the model holding the checkpoint's parameters.
    """
    torch.manual_seed(run_cfg.train.seed)
    model = C2fvlNet(run_cfg.model)
    train_set, val_set = dataset.subset("train"), dataset.subset("val")
    if len(train_set) == 0:
        train_set = dataset
    checkpoint, history = train(model, train_set, run_cfg.train, val_set, fingerprint=run_cfg.fingerprint(),
                                config=run_cfg.to_dict(), verbose=verbose)
    return model, checkpoint, history
