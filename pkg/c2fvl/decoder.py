#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
CNN decoder. Starting from the deepest encoder map, each stage (deep to shallow) concatenates the skip map of its
encoder stage, applies ``DoubleConv``, and upsamples ×2. A last ``DoubleConv`` at input resolution and a 1×1
convolution yield the single-channel logits.
"""

import torch
from torch import nn
import torch.nn.functional as F

from c2fvl.encoder import DoubleConv
from c2fvl.errors import ShapeMismatch


class DecoderStage(nn.Module):
    """
    Parameters
    ----------
    in_channels : int
        Channels of the incoming (deeper) map.
    skip_channels : int
        Channels of the skip map.
    out_channels : int
        Channels of the stage output.
    """

    def __init__(self, in_channels, skip_channels, out_channels):
        super().__init__()
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.conv = DoubleConv(in_channels + skip_channels, out_channels)

    def forward(self, x, skip):
        if x.shape[-2:] != skip.shape[-2:] or x.shape[0] != skip.shape[0]:
            raise ShapeMismatch("Skip map of shape {} does not fit decoder map of shape {}.".format(
                tuple(skip.shape), tuple(x.shape)))
        if x.shape[1] != self.in_channels or skip.shape[1] != self.skip_channels:
            raise ShapeMismatch("Expected {} + {} channels, got {} + {}.".format(
                self.in_channels, self.skip_channels, x.shape[1], skip.shape[1]))
        features = self.conv(torch.cat([x, skip], dim=1))
        return F.interpolate(features, scale_factor=2, mode="nearest")


class Decoder(nn.Module):
    """
    Parameters
    ----------
    channels : sequence of int
        Encoder output channels per stage, shallow to deep; decoder stage `i` outputs ``channels[i]`` channels.

    Attributes
    ----------
    stages : torch.nn.ModuleList
        ``stages[i]`` is the decoder stage of encoder stage `i + 1`; it runs after ``stages[i + 1]``.
    refine : DoubleConv
        Convolutions at input resolution, after ``stages[0]``.
    """

    def __init__(self, channels):
        super().__init__()
        channels = list(channels)
        ins = channels[1:] + [channels[-1]]
        self.stages = nn.ModuleList([DecoderStage(i, c, c) for i, c in zip(ins, channels)])
        self.refine = DoubleConv(channels[0], channels[0])
        self.head = nn.Conv2d(channels[0], 1, kernel_size=1)

    def forward(self, skips, deepest):
        return self.decode_masks(skips, deepest)

    def decode_masks(self, skips, deepest):
        """
        Parameters
        ----------
        skips : sequence of torch.Tensor
            The skip maps (VLAB outputs), shallow to deep, one per stage.
        deepest : torch.Tensor
            The deepest encoder map, at the resolution of the deepest skip.

        Returns
        -------
        torch.Tensor
            Logits of shape `(B, 1, H, W)`.
        """
        if len(skips) != len(self.stages):
            raise ShapeMismatch("Expected {} skip maps, got {}.".format(len(self.stages), len(skips)))
        x = deepest
        for stage, skip in zip(reversed(self.stages), reversed(list(skips))):
            x = stage(x, skip)
        return self.head(self.refine(x))


def logits_to_mask(logits, threshold=0.5):
    """
    Threshold the sigmoid of the logits: pixels with `sigmoid(logit) >= threshold` become 1, all others 0.

    Parameters
    ----------
    logits : torch.Tensor or array_like
    threshold : float, optional
        Probability threshold in (0, 1) (default: 0.5, inclusive).

    Returns
    -------
    torch.Tensor
        uint8 tensor of the logits' shape.
    """
    if not 0 < threshold < 1:
        raise ValueError("Threshold must be in (0, 1), not {}.".format(threshold))
    logits = torch.as_tensor(logits)
    return (torch.sigmoid(logits.double()) >= threshold).to(torch.uint8)
