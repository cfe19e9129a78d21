#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Vision-Language Alignment Block (VLAB): channel recalibration of a text-gated map `x` with two parallel branches,

    F_avg = GAP(MLP_avg(x))
    F_max = GMP(MLP_max(x))
    y     = MLP_out(F_avg + F_max) ⊗ x

where the branch MLPs act on the channel vector of every pixel (1×1 convolutions), MLP_out acts on the pooled channel
vector, and ⊗ broadcasts the resulting channel weights over the map.
"""

from torch import nn

from c2fvl.errors import ReductionNotDividing, ShapeMismatch


class GlobalMaxPool(nn.Module):
    """
    Global max-pooling `(B, C, H, W) -> (B, C)`. On ties, the gradient goes to the first maximum in row-major order.
    """

    def forward(self, x):
        return x.flatten(2).max(dim=2).values


class GlobalAvgPool(nn.Module):

    def forward(self, x):
        return x.mean(dim=(2, 3))


def pixel_mlp(channels, hidden):
    return nn.Sequential(nn.Conv2d(channels, hidden, kernel_size=1), nn.ReLU(), nn.Conv2d(hidden, channels, kernel_size=1))


class Vlab(nn.Module):
    """
    Parameters
    ----------
    channels : int
        Channels `C` of the input map.
    reduction : int, optional
        Reduction ratio `r` of all three MLPs (`C -> C/r -> C`); must divide `C` (default: 4).
    share_branch_mlp : bool, optional
        If `True`, both branches use the same MLP (default: `False`).
    """

    def __init__(self, channels, reduction=4, share_branch_mlp=False):
        super().__init__()
        if reduction <= 0 or channels % reduction != 0:
            raise ReductionNotDividing("Reduction {} does not divide {} channels.".format(reduction, channels))
        hidden = channels // reduction
        self.channels = channels
        self.share_branch_mlp = share_branch_mlp
        self.mlp_avg = pixel_mlp(channels, hidden)
        self.mlp_max = self.mlp_avg if share_branch_mlp else pixel_mlp(channels, hidden)
        self.mlp_out = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.gap = GlobalAvgPool()
        self.gmp = GlobalMaxPool()

    def channel_weights(self, x):
        """
        Return the channel weights `s = MLP_out(F_avg + F_max)` of shape `(B, C)`.
        """
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch("Expected a (B, {}, H, W) map, got shape {}.".format(self.channels, tuple(x.shape)))
        f_avg = self.gap(self.mlp_avg(x))
        f_max = self.gmp(self.mlp_max(x))
        return self.mlp_out(f_avg + f_max)

    def forward(self, x):
        return self.channel_weights(x)[:, :, None, None] * x
