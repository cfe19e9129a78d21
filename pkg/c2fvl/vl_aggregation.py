#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Text gating of encoder features: every channel of a stage's map is multiplied by one entry of the text vector, tiled
to the stage's channel count as `[v, v, ..., v]`:

    F_vl[c, h, w] = F_encoder[c, h, w] * tile(v, C / 8)[c]

The text vector is an input, not a parameter; gradients flow to the features only.
"""

from typing import NamedTuple

import torch

from c2fvl.errors import ChannelsNotDivisibleBy8, ShapeMismatch
from c2fvl.report_codec import VECTOR_LENGTH


#: Text modes: no text (zero vector everywhere), text at the deepest stage only, text at every stage.
TEXT_MODES = ("none", "single", "multi")


class GatedFeature(NamedTuple):
    features: torch.Tensor
    gate: torch.Tensor


def repeat_text(v, channels):
    """
    Tile the text vector to the given channel count.

    Parameters
    ----------
    v : torch.Tensor
        Text vector(s) of shape `(8,)` or `(B, 8)`.
    channels : int
        Target length; must be divisible by 8.

    Returns
    -------
    torch.Tensor
        Shape `(channels,)` or `(B, channels)`: `channels / 8` consecutive copies of `v`.

    Raises
    ------
    ChannelsNotDivisibleBy8
        If ``channels`` is not a positive multiple of 8.
    """
    if channels <= 0 or channels % VECTOR_LENGTH != 0:
        raise ChannelsNotDivisibleBy8("Cannot tile the text vector to {} channels.".format(channels))
    if v.shape[-1] != VECTOR_LENGTH:
        raise ShapeMismatch("Expected text vectors of length {}, got shape {}.".format(VECTOR_LENGTH, tuple(v.shape)))
    return v.repeat(*([1] * (v.dim() - 1)), channels // VECTOR_LENGTH)


def apply_text_gating(features, v):
    """
    Weight the channels of a feature map with the tiled text vector.

    Parameters
    ----------
    features : torch.Tensor
        Feature maps of shape `(B, C, H, W)`, with `C` divisible by 8.
    v : torch.Tensor
        Text vector of shape `(8,)` (shared by the batch) or `(B, 8)`.

    Returns
    -------
    GatedFeature
        The gated maps (same shape as ``features``) and the gate of shape `(C,)` or `(B, C)`.
    """
    if features.dim() != 4:
        raise ShapeMismatch("Expected (B, C, H, W) features, got shape {}.".format(tuple(features.shape)))
    v = v.detach().to(dtype=features.dtype, device=features.device)
    gate = repeat_text(v, features.shape[1])
    if gate.dim() == 2 and gate.shape[0] != features.shape[0]:
        raise ShapeMismatch("Got {} text vectors for a batch of {}.".format(gate.shape[0], features.shape[0]))
    return GatedFeature(features=features * gate[..., :, None, None], gate=gate)


def stage_texts(v, num_stages, mode="multi"):
    """
    Determine the text vector fed to each stage's gate.

    Parameters
    ----------
    v : torch.Tensor
        Text vector(s), `(8,)` or `(B, 8)`.
    num_stages : int
        Number of encoder stages.
    mode : str, optional
        "multi" (default): `v` at every stage; "single": `v` at the deepest stage, all-ones (no gating) elsewhere;
        "none": the zero vector at every stage.

    Returns
    -------
    list
        One vector per stage, shallow to deep.
    """
    if mode == "multi":
        return [v] * num_stages
    if mode == "single":
        return [torch.ones_like(v)] * (num_stages - 1) + [v]
    if mode == "none":
        return [torch.zeros_like(v)] * num_stages
    raise ValueError("Unknown text mode {!r} (expected one of {}).".format(mode, TEXT_MODES))
