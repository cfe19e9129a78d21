#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import csv
from pathlib import Path
import shutil
import tempfile
import unittest

import numpy as np
import torch
from torch import nn

from c2fvl.config import RunConfig
from c2fvl.errors import DataShapeError, NonFiniteLoss
from c2fvl.losses import LossConfig
from c2fvl.synth_data import Dataset, generate_samples
from c2fvl.training import (HISTORY_COLUMNS, BatchStream, TrainConfig, evaluate, predict_masks, train, train_run,
                            write_history)
from tests.helpers import tiny_model, tiny_spec


def tiny_dataset(n_train=4, n_val=2, seed=0):

    return Dataset(generate_samples(tiny_spec(seed=seed), {"train": n_train, "val": n_val}))


def freeze_batch_statistics(model):

    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.momentum = 0.0


class TestBatchStream(unittest.TestCase):

    def test_passes_are_permutations(self):
        stream = BatchStream(5, 5, seed=0)
        for _ in range(3):
            self.assertEqual(sorted(stream.next_batch()), [0, 1, 2, 3, 4])

    def test_full_batches(self):
        stream = BatchStream(3, 4, seed=1)
        batches = [stream.next_batch() for _ in range(6)]
        self.assertTrue(all(len(b) == 4 for b in batches))
        counts = np.bincount(np.concatenate(batches), minlength=3)
        self.assertEqual(counts.tolist(), [8, 8, 8])

    def test_seeded(self):
        a, b = BatchStream(10, 3, seed=2), BatchStream(10, 3, seed=2)
        self.assertEqual([a.next_batch() for _ in range(5)], [b.next_batch() for _ in range(5)])

    def test_empty(self):
        with self.assertRaises(DataShapeError):
            BatchStream(0, 2, seed=0)


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.data = tiny_dataset()
        self.train_set, self.val_set = self.data.subset("train"), self.data.subset("val")

    def test_zero_learning_rate_keeps_parameters(self):
        model = tiny_model()
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        _, history = train(model, self.train_set, TrainConfig(learning_rate=0.0, max_rounds=3, batch_size=2))
        self.assertEqual(len(history), 3)
        for name, p in model.named_parameters():
            self.assertTrue(torch.equal(before[name], p), msg=name)

    def test_early_stopping_on_constant_score(self):
        model = tiny_model()
        freeze_batch_statistics(model)
        cfg = TrainConfig(learning_rate=0.0, max_rounds=10, batch_size=2, eval_every=1, early_stop_patience=1)
        checkpoint, history = train(model, self.train_set, cfg, self.val_set)
        self.assertEqual(len(history), 2)
        self.assertEqual(history[0]["val_dice"], history[1]["val_dice"])
        self.assertEqual(checkpoint.round, 1)
        self.assertEqual(checkpoint.best_val_dice, history[0]["val_dice"])

    def test_history(self):
        model = tiny_model()
        cfg = TrainConfig(max_rounds=5, batch_size=2, eval_every=2, early_stop_patience=10)
        checkpoint, history = train(model, self.train_set, cfg, self.val_set, fingerprint="abc")
        self.assertEqual([row["round"] for row in history], [1, 2, 3, 4, 5])
        self.assertEqual([("val_dice" in row) for row in history], [False, True, False, True, True])
        self.assertEqual(checkpoint.fingerprint, "abc")
        self.assertIn(checkpoint.round, (2, 4, 5))
        best = max(row["val_dice"] for row in history if "val_dice" in row)
        self.assertEqual(checkpoint.best_val_dice, best)
        self.assertTrue(all(np.isfinite(row["loss_total"]) for row in history))

        temp_dir = Path(tempfile.mkdtemp())
        try:
            write_history(temp_dir / "history.csv", history)
            with open(str(temp_dir / "history.csv"), newline="") as f:
                rows = list(csv.DictReader(f))
            self.assertEqual(tuple(rows[0]), HISTORY_COLUMNS)
            self.assertEqual(rows[0]["val_dice"], "")
            self.assertNotEqual(rows[1]["val_dice"], "")
        finally:
            shutil.rmtree(str(temp_dir))

    def test_evaluation_is_deterministic(self):
        model = tiny_model()
        model.train()
        first, second = evaluate(model, self.val_set), evaluate(model, self.val_set)
        self.assertEqual(first.to_dict(), second.to_dict())
        self.assertTrue(model.training)
        masks = predict_masks(model, self.val_set)
        self.assertEqual(len(masks), 2)
        self.assertEqual(masks[0].shape, (16, 16))
        self.assertEqual(masks[0].dtype, np.uint8)

    def test_non_finite_loss(self):
        model = tiny_model()
        with torch.no_grad():
            model.decoder.head.bias.fill_(float("nan"))
        before = {name: p.detach().clone() for name, p in model.named_parameters()}
        with self.assertRaises(NonFiniteLoss) as context:
            train(model, self.train_set, TrainConfig(max_rounds=3, batch_size=2))
        self.assertEqual(context.exception.round, 1)
        self.assertEqual(context.exception.term, "l_dice")
        for name, p in model.named_parameters():
            if name != "decoder.head.bias":
                self.assertTrue(torch.equal(before[name], p), msg=name)

    def test_overfitting_one_sample(self):
        model = tiny_model(seed=3)
        one = Dataset(self.train_set.samples[:1])
        cfg = TrainConfig(learning_rate=1e-2, max_rounds=40, batch_size=2, loss=LossConfig(variant="plain"))
        _, history = train(model, one, cfg)
        losses = [row["loss_total"] for row in history]
        self.assertLess(np.mean(losses[-5:]), 0.8 * np.mean(losses[:5]))

    def test_loss_decreases_with_small_steps(self):
        model = tiny_model(seed=0)
        two = Dataset(self.train_set.samples[:2])
        _, history = train(model, two, TrainConfig(learning_rate=1e-4, max_rounds=10, batch_size=2))
        losses = [row["loss_total"] for row in history]
        for before, after in zip(losses, losses[1:]):
            self.assertLess(after, before)

    def test_data_must_fit_model(self):
        model = tiny_model(image_size=32)
        with self.assertRaises(DataShapeError):
            train(model, self.train_set, TrainConfig(max_rounds=1))
        with self.assertRaises(DataShapeError):
            evaluate(model, self.val_set)

    def test_invalid_config(self):
        bad = [dict(learning_rate=-1.0), dict(batch_size=0), dict(max_rounds=0), dict(threshold=1.0),
               dict(loss=LossConfig(alpha=-0.5))]
        for overrides in bad:
            with self.assertRaises(ValueError, msg=str(overrides)):
                TrainConfig(**overrides).validate()


class TestTrainRun(unittest.TestCase):

    def test_reproducible(self):
        cfg = RunConfig()
        for key, value in (("model.image_size", "16"), ("model.channels", "8,16,24,32"),
                           ("model.token_patches", "2,2,1,1"), ("model.num_heads", "2"),
                           ("train.max_rounds", "3"), ("train.batch_size", "2"), ("train.eval_every", "2")):
            cfg.set(key, value)
        cfg.validate()
        data = tiny_dataset()
        model_a, checkpoint_a, history_a = train_run(cfg, data)
        model_b, checkpoint_b, history_b = train_run(cfg, data)
        self.assertEqual(model_a.cfg, cfg.model)
        self.assertEqual(history_a, history_b)
        self.assertEqual(checkpoint_a.round, checkpoint_b.round)
        for key, value in checkpoint_a.model_state.items():
            np.testing.assert_array_equal(value, checkpoint_b.model_state[key])
        self.assertEqual(checkpoint_a.fingerprint, cfg.fingerprint())

    def test_dataset_without_splits(self):
        cfg = RunConfig()
        for key, value in (("model.image_size", "16"), ("model.channels", "8,16"), ("model.token_patches", "2,2"),
                           ("model.num_heads", "2"), ("loss.variant", "plain"), ("train.max_rounds", "2"),
                           ("train.batch_size", "2")):
            cfg.set(key, value)
        cfg.validate()
        samples = tiny_dataset(n_train=3, n_val=0).samples
        for k, s in enumerate(samples):
            s.sample_id = "case{}".format(k)
        _, checkpoint, history = train_run(cfg, Dataset(samples))
        self.assertEqual(len(history), 2)
        self.assertEqual(checkpoint.best_val_dice, -1.0)


if __name__ == "__main__":
    unittest.main()
