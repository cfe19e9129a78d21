#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
The coarse-to-fine vision-language segmentation network: encoder pyramid, text gating and VLAB at every skip
connection, CNN decoder.
"""

from dataclasses import dataclass
import logging

import torch
from torch import nn

from c2fvl.decoder import Decoder
from c2fvl.encoder import Encoder, stage_configs
from c2fvl.errors import ShapeMismatch
from c2fvl.report_codec import VECTOR_LENGTH
from c2fvl.vl_aggregation import TEXT_MODES, apply_text_gating, stage_texts
from c2fvl.vlab import Vlab


logger = logging.getLogger(__name__)

GATE_ORDERS = ("before_vlab", "after_vlab")


@dataclass
class ModelConfig:
    """
    Architecture of a ``C2fvlNet``.

    Parameters
    ----------
    image_size : int
        Edge length of the (square) input images; must be divisible by `2**len(channels)`.
    channels : tuple
        Encoder output channels per stage (each divisible by 8); the decoder mirrors them.
    token_patches : tuple
        Token patch size per encoder stage.
    num_heads, mlp_ratio, embed_ratio
        Transformer block settings (embedding dimension = ``embed_ratio`` × stage channels).
    upsample : str
        "nearest" or "bilinear" upsampling in the encoder's reconstruction.
    vlab_reduction : int
        Reduction ratio of the VLAB MLPs.
    share_branch_mlp : bool
        Share the MLP of the two VLAB branches.
    text_mode : str
        "multi", "single", or "none" (see ``vl_aggregation.stage_texts``).
    gate_order : str
        "before_vlab" (gate, then VLAB) or "after_vlab".
    use_attention : bool
        Include the transformer path of the encoder.
    use_vlab : bool
        Include the VLAB; without it, the gated maps are the skip maps.
    count_scale : float or None
        If given, the lesion count entry of the text vector is divided by it before gating.
    """
    image_size: int = 64
    channels: tuple = (16, 32, 64, 128)
    token_patches: tuple = (2, 2, 2, 2)
    num_heads: int = 4
    mlp_ratio: float = 2.0
    embed_ratio: int = 2
    upsample: str = "nearest"
    vlab_reduction: int = 4
    share_branch_mlp: bool = False
    text_mode: str = "multi"
    gate_order: str = "before_vlab"
    use_attention: bool = True
    use_vlab: bool = True
    count_scale: float = None

    def validate(self):
        """
        Raise a ``ValueError`` (or ``ShapeMismatch``) if the configuration cannot be built.
        """
        if self.text_mode not in TEXT_MODES:
            raise ValueError("Unknown text mode {!r} (expected one of {}).".format(self.text_mode, TEXT_MODES))
        if self.gate_order not in GATE_ORDERS:
            raise ValueError("Unknown gate order {!r} (expected one of {}).".format(self.gate_order, GATE_ORDERS))
        if self.count_scale is not None and self.count_scale <= 0:
            raise ValueError("count_scale must be positive, not {}.".format(self.count_scale))
        if not self.channels:
            raise ValueError("At least one stage is needed.")
        if self.image_size % 2 ** len(self.channels):
            raise ShapeMismatch("Image size {} is not divisible by 2**{}.".format(self.image_size, len(self.channels)))
        for c in self.channels:
            if c % self.vlab_reduction:
                raise ValueError("VLAB reduction {} does not divide {} channels.".format(self.vlab_reduction, c))
        self.stage_configs()

    def stage_configs(self, in_channels=1):
        return stage_configs((self.image_size, self.image_size), self.channels, list(self.token_patches),
                             in_channels=in_channels, num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
                             embed_ratio=self.embed_ratio)


@dataclass
class ModelOutput:
    """
    Result of a forward pass.

    Attributes
    ----------
    logits : torch.Tensor
        `(B, 1, H, W)` segmentation logits.
    pyramid : FeaturePyramid
        All encoder maps.
    gated : list
        Text-gated maps per stage (``vl_aggregation.GatedFeature``).
    vlab_outputs : list
        Skip maps `y_i` per stage, shallow to deep; these are aligned by the cosine losses.
    """
    logits: torch.Tensor
    pyramid: object
    gated: list
    vlab_outputs: list


class C2fvlNet(nn.Module):
    """
    Segmentation network conditioned on 8-dimensional text vectors.

    Calling the network on an image batch `(B, 1, H, W)` and text vectors `(B, 8)` (or a single `(8,)` vector shared
    by the batch) returns a ``ModelOutput``.
    """

    def __init__(self, cfg=None):
        super().__init__()
        cfg = ModelConfig() if cfg is None else cfg
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.stage_configs(), use_attention=cfg.use_attention, upsample=cfg.upsample)
        if cfg.use_vlab:
            self.vlabs = nn.ModuleList([Vlab(c, cfg.vlab_reduction, cfg.share_branch_mlp) for c in cfg.channels])
        else:
            self.vlabs = None
        self.decoder = Decoder(cfg.channels)

    @property
    def num_stages(self):
        return len(self.cfg.channels)

    def prepare_text(self, text, batch_size, dtype):
        """
        Convert text vectors to a `(B, 8)` tensor of the model's dtype, applying ``count_scale``.
        """
        text = torch.as_tensor(text, dtype=dtype)
        if text.dim() == 1:
            text = text.unsqueeze(0).expand(batch_size, -1)
        if text.shape != (batch_size, VECTOR_LENGTH):
            raise ShapeMismatch("Expected text vectors of shape ({}, {}), got {}.".format(
                batch_size, VECTOR_LENGTH, tuple(text.shape)))
        if self.cfg.count_scale is not None:
            text = text.clone()
            text[:, 1] = text[:, 1] / self.cfg.count_scale
        return text

    def skip_maps(self, pyramid, text):
        """
        Gate and align every encoder stage's map; return `(gated, vlab_outputs)`.
        """
        gated, outputs = [], []
        texts = stage_texts(text, self.num_stages, self.cfg.text_mode)
        for i, (features, v) in enumerate(zip(pyramid.encoder, texts)):
            vlab = self.vlabs[i] if self.vlabs is not None else None
            if self.cfg.gate_order == "before_vlab":
                g = apply_text_gating(features, v)
                y = vlab(g.features) if vlab is not None else g.features
            else:
                aligned = vlab(features) if vlab is not None else features
                g = apply_text_gating(aligned, v)
                y = g.features
            gated.append(g)
            outputs.append(y)
        return gated, outputs

    def forward(self, image, text):
        text = self.prepare_text(text, image.shape[0], image.dtype)
        pyramid = self.encoder(image)
        gated, vlab_outputs = self.skip_maps(pyramid, text)
        logits = self.decoder(vlab_outputs, pyramid.encoder[-1])
        return ModelOutput(logits=logits, pyramid=pyramid, gated=gated, vlab_outputs=vlab_outputs)
