#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Grid sweeps over training, loss and text settings. Every grid cell trains a model from scratch on the same dataset
and reports its validation scores; cells may run in parallel processes, each single-threaded.
"""

from concurrent.futures import ProcessPoolExecutor
import csv
import itertools
import logging

import torch
from tqdm import tqdm

from c2fvl.config import RunConfig
from c2fvl.errors import ConfigError, GridTooLarge
from c2fvl.synth_data import load_dataset
from c2fvl.training import evaluate, train_run


logger = logging.getLogger(__name__)

#: Parameters that may be swept, by short name.
GRID_KEYS = {"batch_size": "train.batch_size",
             "learning_rate": "train.learning_rate",
             "alpha": "loss.alpha",
             "beta": "loss.beta",
             "gamma": "loss.gamma",
             "variant": "loss.variant",
             "text_mode": "model.text_mode"}

MAX_CELLS = 64


def grid_key(name):
    """
    Map a short (e.g. "alpha") or full (e.g. "loss.alpha") parameter name to its config key.
    """
    if name in GRID_KEYS:
        return GRID_KEYS[name]
    if name in GRID_KEYS.values():
        return name
    raise ConfigError("Cannot sweep over {!r} (expected one of {}).".format(name, sorted(GRID_KEYS)))


def parse_grid(specs):
    """
    Parse grid axes given as "name=value1,value2,..." strings.

    Returns
    -------
    list
        `(config key, [value strings])` pairs in the given order.

    Raises
    ------
    ConfigError
        If the grid is empty, an axis is malformed or repeated, or a parameter cannot be swept.
    """
    axes, seen = [], set()
    for spec in specs:
        name, eq, values = spec.partition("=")
        values = [v.strip() for v in values.split(",") if v.strip()]
        if not eq or not values:
            raise ConfigError("Expected a grid axis of the form name=value1,value2,..., not {!r}.".format(spec))
        key = grid_key(name.strip())
        if key in seen:
            raise ConfigError("Grid axis {} given twice.".format(key))
        seen.add(key)
        axes.append((key, values))
    if not axes:
        raise ConfigError("The sweep grid is empty.")
    return axes


def expand_grid(axes, max_cells=MAX_CELLS):
    """
    List all cells of the grid (row-major, the last axis varying fastest) as lists of `(key, value)` pairs.

    Raises
    ------
    GridTooLarge
        If there are more than ``max_cells`` cells.
    """
    n_cells = 1
    for _, values in axes:
        n_cells *= len(values)
    if n_cells > max_cells:
        raise GridTooLarge("The grid has {} cells, more than the cap of {}.".format(n_cells, max_cells))
    keys = [key for key, _ in axes]
    return [list(zip(keys, combination)) for combination in itertools.product(*(values for _, values in axes))]


def cell_config(base, cell):
    """
    Apply a grid cell to a copy of the base configuration and validate the result.
    """
    cfg = RunConfig.from_dict(base.to_dict())
    for key, value in cell:
        cfg.set(key, value)
    cfg.validate()
    return cfg


def run_cell(job):
    """
    Train and evaluate one grid cell; returns its result row. Runs single-threaded; the thread count of the calling
    process is restored afterwards.
    """
    base_dict, cell, dataset_dir = job
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train_cell(base_dict, cell, dataset_dir)
    finally:
        torch.set_num_threads(threads)


def _train_cell(base_dict, cell, dataset_dir):

    cfg = cell_config(RunConfig.from_dict(base_dict), cell)
    dataset = load_dataset(dataset_dir, convention=cfg.data.convention)
    model, checkpoint, history = train_run(cfg, dataset)
    val_set = dataset.subset("val")
    row = dict(cell)
    if len(val_set):
        report = evaluate(model, val_set, cfg.train.threshold)
        row["val_dice"], row["val_iou"] = report.dice, report.iou
    else:
        row["val_dice"], row["val_iou"] = "", ""
    row["rounds"] = len(history)
    row["best_round"] = checkpoint.round
    row["fingerprint"] = cfg.fingerprint()
    return row


def run_sweep(base, axes, dataset_dir=None, workers=1, max_cells=MAX_CELLS, verbose=False):
    """
    Run a sweep.

    Parameters
    ----------
    base : RunConfig
        Settings shared by all cells.
    axes : list
        Grid axes from ``parse_grid``.
    dataset_dir : str, optional
        Dataset directory (default: ``base.data.dataset``).
    workers : int, optional
        Number of worker processes; 1 runs all cells in this process (default: 1).
    max_cells : int, optional
        Cap on the number of cells (default: 64).
    verbose : bool, optional
        If `True`, show progress (default: `False`).

    Returns
    -------
    list
        One result row (dict) per cell, in grid order: the swept values, validation Dice and IoU (percent), number of
        rounds, round of the best checkpoint and the cell's config fingerprint.
    """
    cells = expand_grid(axes, max_cells)
    for cell in cells:
        cell_config(base, cell)
    dataset_dir = base.data.dataset if dataset_dir is None else dataset_dir
    jobs = [(base.to_dict(), cell, str(dataset_dir)) for cell in cells]
    logger.info("Sweeping %d cells with %d worker(s)", len(jobs), workers)
    if workers <= 1:
        return [run_cell(job) for job in tqdm(jobs, desc="Sweep", disable=not verbose)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(run_cell, jobs), total=len(jobs), desc="Sweep", disable=not verbose))


def write_results(path, axes, rows):
    """
    Write sweep results as CSV: one column per grid axis, then the result columns.
    """
    columns = [key for key, _ in axes] + ["val_dice", "val_iou", "rounds", "best_round", "fingerprint"]
    with open(str(path), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in columns})
