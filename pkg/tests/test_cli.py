#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from contextlib import redirect_stdout
import csv
import io
import json
from pathlib import Path
import shutil
import tempfile
import unittest

import numpy as np

from c2fvl import png
from c2fvl.cli import main
from c2fvl.report_codec import read_reports


EXEMPLAR = "Bilateral pulmonary infection, two infected areas, upper middle left lung and middle lower right lung"


def run(*argv):
    """
    Run the command line interface; return the exit code and the printed output.
    """
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(["-q"] + [str(a) for a in argv])
    return code, out.getvalue()


class TestSimpleCommands(unittest.TestCase):

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(str(self.temp_dir))

    def test_encode_text(self):
        code, out = run("encode-text", "--report", EXEMPLAR)
        self.assertEqual(code, 0)
        self.assertEqual(out, "[1,2,1,1,0,0,1,1]\n")

    def test_encode_text_errors(self):
        code, _ = run("encode-text", "--report", "Bilateral pulmonary infection, one infected area, upper left lung")
        self.assertEqual(code, 4)
        code, _ = run("encode-text", "--report", "Unilateral pulmonary infection, ² infected areas, upper left lung")
        self.assertEqual(code, 4)
        code, _ = run("encode-text", "--reports", self.temp_dir / "missing.tsv")
        self.assertEqual(code, 4)

    def test_missing_config(self):
        code, _ = run("train", "--config", self.temp_dir / "missing.cfg")
        self.assertEqual(code, 2)

    def test_unknown_override(self):
        code, _ = run("train", "--model.width", "3")
        self.assertEqual(code, 2)

    def test_empty_sweep_grid(self):
        code, _ = run("sweep", "--out", self.temp_dir / "sweep.csv")
        self.assertEqual(code, 2)
        self.assertFalse((self.temp_dir / "sweep.csv").exists())

    def test_bad_arguments(self):
        with self.assertRaises(SystemExit) as context:
            with redirect_stdout(io.StringIO()):
                main(["gen-data"])
        self.assertEqual(context.exception.code, 2)

    def test_gen_data(self):
        code, out = run("gen-data", self.temp_dir / "data", "--total", 10, "--ratios", "4,1", "--size", 16,
                        "--max-lesions", 2)
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["train"], 8)
        reports = read_reports(self.temp_dir / "data" / "reports.tsv")
        self.assertEqual(len(reports), 10)
        self.assertEqual(sum(1 for k in reports if k.startswith("val_")), 2)
        code, _ = run("gen-data", self.temp_dir / "data", "--total", 10, "--ratios", "x")
        self.assertEqual(code, 2)
        code, _ = run("gen-data", self.temp_dir / "data", "--size", 12)
        self.assertEqual(code, 2)

    def test_eval_identical_directories(self):
        rng = np.random.default_rng(0)
        masks = self.temp_dir / "masks"
        masks.mkdir()
        for k in range(3):
            png.save_mask(masks / "m{}.png".format(k), rng.random((8, 8)) < 0.3)
        code, out = run("eval", "--pred", masks, "--gt", masks, "--json", self.temp_dir / "eval.json")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out), {"dice": 100.0, "iou": 100.0, "n_samples": 3})
        self.assertEqual(json.loads((self.temp_dir / "eval.json").read_text())["dice"], 100.0)

    def test_eval_needs_inputs(self):
        code, _ = run("eval", "--pred", self.temp_dir)
        self.assertEqual(code, 2)


class TestTrainedModel(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.temp_dir = Path(tempfile.mkdtemp())
        cls.data = cls.temp_dir / "data"
        cls.run_dir = cls.temp_dir / "run"
        run("gen-data", cls.data, "--train", 4, "--val", 2, "--test", 2, "--size", 16, "--max-lesions", 2)
        config = cls.temp_dir / "tiny.cfg"
        config.write_text("model.image_size = 16\nmodel.channels = 8,16,24,32\nmodel.token_patches = 2,2,1,1\n"
                          "model.num_heads = 2\ntrain.max_rounds = 3\ntrain.batch_size = 2\ntrain.eval_every = 1\n"
                          "data.dataset = {}\ndata.output = {}\n".format(cls.data, cls.run_dir), encoding="utf-8")
        cls.train_code, cls.train_out = run("train", "--config", config, "--train.seed", "5")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(str(cls.temp_dir))

    def test_train_outputs(self):
        self.assertEqual(self.train_code, 0)
        summary = json.loads(self.train_out)
        self.assertEqual(summary["rounds"], 3)
        self.assertTrue(0.0 <= summary["val_dice"] <= 100.0)
        for name in ("checkpoint.c2fvl", "history.csv", "config.txt", "eval.json"):
            self.assertTrue((self.run_dir / name).is_file(), msg=name)
        self.assertIn("train.seed = 5", (self.run_dir / "config.txt").read_text())
        with open(str(self.run_dir / "history.csv"), newline="") as f:
            self.assertEqual(len(list(csv.DictReader(f))), 3)

    def test_predict_is_deterministic(self):
        checkpoint = self.run_dir / "checkpoint.c2fvl"
        first, second = self.temp_dir / "pred1", self.temp_dir / "pred2"
        for out in (first, second):
            code, printed = run("predict", "--checkpoint", checkpoint, "--dataset", self.data, "--out", out)
            self.assertEqual(code, 0)
            self.assertEqual(json.loads(printed)["n_samples"], 2)
        for path in sorted(first.glob("*.png")):
            np.testing.assert_array_equal(png.open_mask(path), png.open_mask(second / path.name))
        self.assertEqual(sorted(p.name for p in first.glob("*.png")), ["test_00000.png", "test_00001.png"])

    def test_predict_single_image(self):
        code, _ = run("predict", "--checkpoint", self.run_dir / "checkpoint.c2fvl", "--image",
                      self.data / "images" / "test_00000.png", "--report", EXEMPLAR, "--out", self.temp_dir / "one")
        self.assertEqual(code, 0)
        self.assertEqual(png.open_mask(self.temp_dir / "one" / "test_00000.png").shape, (16, 16))

    def test_eval_checkpoint(self):
        code, out = run("eval", "--checkpoint", self.run_dir / "checkpoint.c2fvl", "--dataset", self.data, "--split",
                        "val", "--csv", self.temp_dir / "val.csv")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(out)["n_samples"], 2)
        self.assertAlmostEqual(json.loads(out)["dice"], json.loads(self.train_out)["val_dice"])

    def test_saliency(self):
        out = self.temp_dir / "saliency"
        args = ["saliency", "--checkpoint", self.run_dir / "checkpoint.c2fvl", "--image",
                self.data / "images" / "val_00000.png", "--report", EXEMPLAR, "--out", out]
        code, printed = run(*args)
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(printed)["stages"], [4, 3, 2, 1])
        for k in range(1, 5):
            self.assertTrue((out / "stage_{}.png".format(k)).is_file())
        self.assertTrue((out / "overlay_stage_4.png").is_file())
        code, _ = run(*(args + ["--stage", "7"]))
        self.assertEqual(code, 1)


if __name__ == "__main__":
    unittest.main()
