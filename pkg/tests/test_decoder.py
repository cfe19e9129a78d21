#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import unittest

import numpy as np
import torch

from c2fvl.decoder import Decoder, DecoderStage, logits_to_mask
from c2fvl.errors import ShapeMismatch
from tests.helpers import double_conv_oracle, nearest_upsample


class TestDecoder(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)

    def test_stage_matches_oracle(self):
        stage = DecoderStage(16, 8, 8).double().eval()
        rng = np.random.default_rng(0)
        x, skip = rng.standard_normal((1, 16, 4, 4)), rng.standard_normal((1, 8, 4, 4))
        with torch.no_grad():
            out = stage(torch.from_numpy(x), torch.from_numpy(skip)).numpy()
        expected = nearest_upsample(double_conv_oracle(np.concatenate([x[0], skip[0]]), stage.conv), (8, 8))
        np.testing.assert_allclose(out[0], expected, rtol=1e-10, atol=1e-10)

    def test_logit_shape(self):
        decoder = Decoder((8, 16, 24, 32))
        skips = [torch.randn(2, c, s, s) for c, s in zip((8, 16, 24, 32), (8, 4, 2, 1))]
        logits = decoder(skips, torch.randn(2, 32, 1, 1))
        self.assertEqual(tuple(logits.shape), (2, 1, 16, 16))
        self.assertEqual([s.conv.layers[0].in_channels for s in decoder.stages], [24, 40, 56, 64])

    def test_logits_vary_within_pixel_blocks(self):
        decoder = Decoder((8, 16)).double().eval()
        skips = [torch.randn(1, 8, 8, 8, dtype=torch.float64), torch.randn(1, 16, 4, 4, dtype=torch.float64)]
        with torch.no_grad():
            logits = decoder(skips, torch.randn(1, 16, 4, 4, dtype=torch.float64))[0, 0].numpy()
        blocks = logits.reshape(8, 2, 8, 2).transpose(0, 2, 1, 3).reshape(64, 4)
        spread = blocks.max(axis=1) - blocks.min(axis=1)
        self.assertGreater(float(spread.max()), 1e-6)
        self.assertEqual(decoder.refine.layers[0].in_channels, 8)

    def test_errors(self):
        decoder = Decoder((8, 16))
        with self.assertRaises(ShapeMismatch):
            decoder([torch.randn(1, 8, 4, 4)], torch.randn(1, 16, 2, 2))
        with self.assertRaises(ShapeMismatch):
            decoder([torch.randn(1, 8, 4, 4), torch.randn(1, 16, 3, 3)], torch.randn(1, 16, 2, 2))
        with self.assertRaises(ShapeMismatch):
            decoder([torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2)], torch.randn(1, 16, 2, 2))

    def test_logits_to_mask(self):
        mask = logits_to_mask(torch.tensor([-3.0, -0.1, 0.0, 2.0]))
        self.assertEqual(mask.dtype, torch.uint8)
        self.assertEqual(mask.tolist(), [0, 0, 1, 1])
        self.assertEqual(logits_to_mask(torch.tensor([0.0, 1.0]), threshold=0.7).tolist(), [0, 1])
        with self.assertRaises(ValueError):
            logits_to_mask(torch.zeros(2), threshold=1.0)


if __name__ == "__main__":
    unittest.main()
