#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Hierarchical encoder: per stage, a convolution block extracts local features (F_cnn), a transformer block over patch
tokens of F_cnn extracts global features (F_vit), and the latter are upsampled, projected, and added onto the former:

    F_rt      = ReLU(BatchNorm(Conv1x1(Upsample(F_vit))))
    F_encoder = F_cnn + F_rt

Spatial dimensions halve with every stage.
"""

from dataclasses import dataclass, field
import math

import torch
from torch import nn
import torch.nn.functional as F

from c2fvl.errors import ChannelsNotDivisibleBy8, ShapeMismatch


@dataclass
class StageConfig:
    """
    Configuration of one encoder stage.

    Parameters
    ----------
    stage_index : int
        Stage number, starting at 1.
    in_channels, out_channels : int
        Channels of the stage's input and of its output maps; ``out_channels`` must be divisible by 8.
    map_shape : tuple
        Spatial shape `(H_i, W_i)` of the stage's output maps, i.e. the input shape divided by `2**stage_index`.
    num_heads : int
        Attention heads of the transformer block.
    token_patch : int
        Edge length of the patches that become tokens; must divide both entries of ``map_shape``.
    mlp_ratio : float
        Hidden width of the transformer MLP relative to the embedding dimension.
    embed_dim : int or None
        Token embedding dimension; `None` means twice ``out_channels``.
    """
    stage_index: int
    in_channels: int
    out_channels: int
    map_shape: tuple
    num_heads: int = 4
    token_patch: int = 2
    mlp_ratio: float = 2.0
    embed_dim: int = None

    def __post_init__(self):

        if self.embed_dim is None:
            self.embed_dim = 2 * self.out_channels
        self.map_shape = tuple(int(s) for s in self.map_shape)
        for name in ("stage_index", "in_channels", "out_channels", "num_heads", "token_patch", "embed_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError("Stage {}: {} must be positive.".format(self.stage_index, name))
        if self.mlp_ratio <= 0:
            raise ValueError("Stage {}: mlp_ratio must be positive.".format(self.stage_index))
        if self.out_channels % 8 != 0:
            raise ChannelsNotDivisibleBy8("Stage {}: out_channels {} is not divisible by 8.".format(
                self.stage_index, self.out_channels))
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("Stage {}: embed_dim {} is not divisible by num_heads {}.".format(
                self.stage_index, self.embed_dim, self.num_heads))
        if any(s % self.token_patch != 0 for s in self.map_shape):
            raise ShapeMismatch("Stage {}: token_patch {} does not divide map shape {}.".format(
                self.stage_index, self.token_patch, self.map_shape))

    @property
    def token_grid(self):
        """tuple: Number of tokens along each spatial axis."""
        return tuple(s // self.token_patch for s in self.map_shape)


def stage_configs(image_shape, channels, token_patches, in_channels=1, num_heads=4, mlp_ratio=2.0, embed_ratio=2):
    """
    Build the ``StageConfig`` list for an encoder with ``len(channels)`` stages.

    Parameters
    ----------
    image_shape : tuple
        Spatial shape `(H, W)` of the input images; both must be divisible by `2**len(channels)`.
    channels : sequence of int
        Output channels per stage.
    token_patches : int or sequence of int
        Patch size per stage (a single value is used for all stages).

    Returns
    -------
    list
        One ``StageConfig`` per stage.
    """
    n = len(channels)
    if any(s % 2 ** n != 0 for s in image_shape):
        raise ShapeMismatch("Image shape {} is not divisible by 2**{}.".format(tuple(image_shape), n))
    if isinstance(token_patches, int):
        token_patches = [token_patches] * n
    if len(token_patches) != n:
        raise ValueError("Got {} token patch sizes for {} stages.".format(len(token_patches), n))
    configs = []
    previous = in_channels
    for i, (c, p) in enumerate(zip(channels, token_patches), start=1):
        shape = tuple(s // 2 ** i for s in image_shape)
        configs.append(StageConfig(stage_index=i, in_channels=previous, out_channels=c, map_shape=shape,
                                   num_heads=num_heads, token_patch=p, mlp_ratio=mlp_ratio, embed_dim=embed_ratio * c))
        previous = c
    return configs


class StageBatchNorm(nn.BatchNorm2d):
    """
    ``BatchNorm2d`` that uses its running statistics when training on a single-sample batch.
    """

    def forward(self, x):
        if self.training and x.shape[0] == 1:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                training=False, momentum=0.0, eps=self.eps)
        return super().forward(x)


class DoubleConv(nn.Module):
    """
    Two 3×3 convolutions (padding 1), each followed by batch normalization and ReLU.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            StageBatchNorm(out_channels),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            StageBatchNorm(out_channels),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.layers(x)


class ConvBlock(nn.Module):
    """
    Convolution path of an encoder stage: ``DoubleConv`` followed by 2×2 max-pooling, i.e. `C_in×H×W` to
    `C_out×H/2×W/2`.
    """

    def __init__(self, cfg):
        super().__init__()
        self.conv = DoubleConv(cfg.in_channels, cfg.out_channels)
        self.pool = nn.MaxPool2d(kernel_size=2)

    def forward(self, x):
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeMismatch("Cannot max-pool a map of odd spatial shape {}.".format(tuple(x.shape[-2:])))
        return self.pool(self.conv(x))


def scaled_dot_product_attention(q, k, v):
    """
    Compute `softmax(q k^T / sqrt(d)) v`.

    Parameters
    ----------
    q, k, v : torch.Tensor
        Tensors of shape `(..., N, d)`.

    Returns
    -------
    tuple
        The attention output `(..., N, d)` and the attention weights `(..., N, N)`, whose rows sum to one.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class MultiHeadSelfAttention(nn.Module):

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim {} is not divisible by num_heads {}.".format(dim, num_heads))
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, need_weights=False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        out, weights = scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])  # (B, heads, N, d_head)
        out = self.proj(out.transpose(1, 2).reshape(b, n, d))
        return (out, weights) if need_weights else out


class TransformerBlock(nn.Module):
    """
    Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
    """

    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AttentionBlock(nn.Module):
    """
    Attention path of an encoder stage: patch-tokenize F_cnn, add a learned positional embedding, apply one
    ``TransformerBlock``, and reshape the tokens into a map at token resolution (`embed_dim×H_i/p×W_i/p`).
    """

    def __init__(self, cfg):
        super().__init__()
        self.patch = cfg.token_patch
        self.token_grid = cfg.token_grid
        self.patch_embed = nn.Conv2d(cfg.out_channels, cfg.embed_dim, kernel_size=cfg.token_patch,
                                     stride=cfg.token_patch)
        self.pos_embedding = nn.Parameter(torch.zeros(1, self.token_grid[0] * self.token_grid[1], cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        self.block = TransformerBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)

    def tokens(self, f_cnn):
        """
        Patch-embed the given map and add the positional embedding; return `(tokens, (h, w))`.
        """
        if f_cnn.shape[-2] % self.patch or f_cnn.shape[-1] % self.patch:
            raise ShapeMismatch("Token patch {} does not divide map shape {}.".format(
                self.patch, tuple(f_cnn.shape[-2:])))
        grid = self.patch_embed(f_cnn)
        b, d, h, w = grid.shape
        if (h, w) != self.token_grid:
            raise ShapeMismatch("Expected a token grid of {}, got {}.".format(self.token_grid, (h, w)))
        return grid.flatten(2).transpose(1, 2) + self.pos_embedding, (h, w)

    def forward(self, f_cnn):
        t, (h, w) = self.tokens(f_cnn)
        t = self.block(t)
        return t.transpose(1, 2).reshape(t.shape[0], -1, h, w)


class ReconstructFuse(nn.Module):
    """
    Bring F_vit back to F_cnn's shape and add it on: returns `(F_encoder, F_rt)`.
    """

    def __init__(self, embed_dim, channels, upsample="nearest"):
        super().__init__()
        if upsample not in ("nearest", "bilinear"):
            raise ValueError("Unknown upsampling mode {!r}.".format(upsample))
        self.upsample = upsample
        self.conv = nn.Conv2d(embed_dim, channels, kernel_size=1)
        self.bn = StageBatchNorm(channels)
        self.relu = nn.ReLU()

    def forward(self, f_vit, f_cnn):
        (h, w), (hv, wv) = f_cnn.shape[-2:], f_vit.shape[-2:]
        if h % hv or w % wv:
            raise ShapeMismatch("F_vit shape {} does not evenly divide F_cnn shape {}.".format((hv, wv), (h, w)))
        if f_vit.shape[1] != self.conv.in_channels or f_cnn.shape[1] != self.conv.out_channels:
            raise ShapeMismatch("Expected {} F_vit and {} F_cnn channels, got {} and {}.".format(
                self.conv.in_channels, self.conv.out_channels, f_vit.shape[1], f_cnn.shape[1]))
        if self.upsample == "nearest":
            up = F.interpolate(f_vit, size=(h, w), mode="nearest")
        else:
            up = F.interpolate(f_vit, size=(h, w), mode="bilinear", align_corners=False)
        f_rt = self.relu(self.bn(self.conv(up)))
        return f_cnn + f_rt, f_rt


@dataclass
class StageOutput:
    """The four maps of one encoder stage (``vit`` is `None` without attention path)."""
    cnn: torch.Tensor
    vit: torch.Tensor
    rt: torch.Tensor
    encoder: torch.Tensor


@dataclass
class FeaturePyramid:
    """
    Per-stage encoder maps, shallow to deep: ``cnn[i]``, ``vit[i]``, ``rt[i]``, ``encoder[i]`` belong to stage
    `i + 1`.
    """
    cnn: list = field(default_factory=list)
    vit: list = field(default_factory=list)
    rt: list = field(default_factory=list)
    encoder: list = field(default_factory=list)

    def append(self, stage_output):
        self.cnn.append(stage_output.cnn)
        self.vit.append(stage_output.vit)
        self.rt.append(stage_output.rt)
        self.encoder.append(stage_output.encoder)

    def __len__(self):
        return len(self.encoder)


class EncoderStage(nn.Module):

    def __init__(self, cfg, use_attention=True, upsample="nearest"):
        super().__init__()
        self.cfg = cfg
        self.conv = ConvBlock(cfg)
        self.use_attention = use_attention
        if use_attention:
            self.attention = AttentionBlock(cfg)
            self.fuse = ReconstructFuse(cfg.embed_dim, cfg.out_channels, upsample=upsample)

    def forward(self, x):
        f_cnn = self.conv(x)
        if not self.use_attention:
            return StageOutput(cnn=f_cnn, vit=None, rt=torch.zeros_like(f_cnn), encoder=f_cnn)
        f_vit = self.attention(f_cnn)
        f_encoder, f_rt = self.fuse(f_vit, f_cnn)
        return StageOutput(cnn=f_cnn, vit=f_vit, rt=f_rt, encoder=f_encoder)


class Encoder(nn.Module):
    """
    Stack of ``EncoderStage`` modules; calling it on a batch of images `(B, C, H, W)` encodes the feature pyramid.

    Parameters
    ----------
    stages : sequence of StageConfig
        The stage configurations, shallow to deep (see ``stage_configs``).
    use_attention : bool, optional
        If `False`, stages consist of the convolution path only and `F_encoder = F_cnn` (default: `True`).
    upsample : str, optional
        Upsampling mode of the reconstruction, "nearest" (default) or "bilinear".
    """

    def __init__(self, stages, use_attention=True, upsample="nearest"):
        super().__init__()
        self.configs = list(stages)
        self.stages = nn.ModuleList([EncoderStage(cfg, use_attention, upsample) for cfg in self.configs])

    @property
    def channels(self):
        return [cfg.out_channels for cfg in self.configs]

    def forward(self, image):
        return self.encode_pyramid(image)

    def encode_pyramid(self, image):
        """
        Apply all stages in sequence, each consuming the previous stage's F_encoder, and record all per-stage maps.

        Raises
        ------
        ShapeMismatch
            If the image's spatial shape is not divisible by `2**S` or its channels do not fit.
        """
        n = len(self.stages)
        if image.dim() != 4:
            raise ShapeMismatch("Expected a (B, C, H, W) batch, got shape {}.".format(tuple(image.shape)))
        if image.shape[-2] % 2 ** n or image.shape[-1] % 2 ** n:
            raise ShapeMismatch("Image shape {} is not divisible by 2**{}.".format(tuple(image.shape[-2:]), n))
        if image.shape[1] != self.configs[0].in_channels:
            raise ShapeMismatch("Expected {} image channel(s), got {}.".format(
                self.configs[0].in_channels, image.shape[1]))
        pyramid = FeaturePyramid()
        x = image
        for stage in self.stages:
            out = stage(x)
            pyramid.append(out)
            x = out.encoder
        return pyramid
