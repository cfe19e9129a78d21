#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Grad-CAM maps of the decoder stages.

For decoder stage `k` (1 = shallowest, S = deepest, which runs first), the activations are the output of the stage's
double convolution, before upsampling. The target scalar is the sum of the foreground logits over the predicted mask
(all pixels whose probability is at least 0.5), or over the whole image if nothing is predicted. Channel weights are
the spatially averaged gradients of the target, and the map is the ReLU of the weighted channel sum, divided by its
maximum.
"""

from dataclasses import dataclass
import logging

import numpy as np
import torch

from c2fvl import png
from c2fvl.errors import InvalidStage, ShapeMismatch


logger = logging.getLogger(__name__)


@dataclass
class SaliencyMap:
    """
    Attributes
    ----------
    stage : int
        Decoder stage (1 to S).
    heatmap : numpy.ndarray
        Non-negative map at the stage's resolution; its maximum is 1 unless ``is_zero``.
    is_zero : bool
        The map is identically zero (and therefore not normalized).
    image_shape : tuple
        Shape of the input image, for overlays.
    """
    stage: int
    heatmap: np.ndarray
    is_zero: bool
    image_shape: tuple = ()

    def upsampled(self, shape=None):
        """
        Return the heatmap resized (nearest neighbor) to the given shape (default: the image shape).
        """
        return png.resize_nearest(self.heatmap, self.image_shape if shape is None else shape)


class GradCAM:
    """
    Records the activations of the given decoder stages during a forward pass.

    Use as a context manager so that the hooks are removed afterwards.
    """

    def __init__(self, model, stages):
        self.model = model
        self.stages = list(stages)
        self.activations = {}
        self.handles = []
        for stage in self.stages:
            module = model.decoder.stages[stage - 1].conv
            self.handles.append(module.register_forward_hook(self._recorder(stage)))

    def _recorder(self, stage):

        def record(module, inputs, output):
            self.activations[stage] = output

        return record

    def close(self):
        for handle in self.handles:
            handle.remove()
        self.handles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __call__(self, image, text):
        """
        Run the model and return `(activations, gradients)`, both lists in the order of ``stages``.
        """
        self.activations = {}
        output = self.model(image, text)
        logits = output.logits
        region = logits >= 0
        if not bool(region.any()):
            logger.debug("Empty predicted mask; targeting the logits of the whole image.")
            region = torch.ones_like(region)
        target = (logits * region.to(logits.dtype)).sum()
        activations = [self.activations[stage] for stage in self.stages]
        gradients = torch.autograd.grad(target, activations, allow_unused=True)
        gradients = [torch.zeros_like(a) if g is None else g for a, g in zip(activations, gradients)]
        return activations, gradients


def validate_stage(model, stage):
    """
    Raise an ``InvalidStage`` error unless `1 <= stage <= S`.
    """
    if isinstance(stage, bool) or not isinstance(stage, (int, np.integer)) or not 1 <= stage <= model.num_stages:
        raise InvalidStage("Decoder stage must be in 1..{}, not {!r}.".format(model.num_stages, stage))


def weighted_activation_map(activations, gradients):
    """
    Compute the unnormalized Grad-CAM map `ReLU(Σ_c mean(∂y/∂A_c) A_c)` of one sample.

    Parameters
    ----------
    activations, gradients : torch.Tensor or array_like
        Arrays of shape `(C, h, w)`.

    Returns
    -------
    numpy.ndarray
        The `(h, w)` map.
    """
    activations = torch.as_tensor(activations).detach().double()
    gradients = torch.as_tensor(gradients).detach().double()
    if activations.shape != gradients.shape or activations.dim() != 3:
        raise ShapeMismatch("Activations {} and gradients {} must have equal (C, h, w) shapes.".format(
            tuple(activations.shape), tuple(gradients.shape)))
    weights = gradients.mean(dim=(1, 2))
    return torch.relu((weights[:, None, None] * activations).sum(dim=0)).numpy()


def normalize_map(heat):
    """
    Divide a non-negative map by its maximum; return `(map, is_zero)`. A zero map is returned unchanged.
    """
    heat = np.asarray(heat, dtype=np.float64)
    peak = float(heat.max()) if heat.size else 0.0
    if peak <= 0:
        return np.zeros_like(heat), True
    return heat / peak, False


def _prepare(model, image, text):

    dtype = next(model.parameters()).dtype
    image = torch.as_tensor(np.asarray(image), dtype=dtype)
    while image.dim() < 4:
        image = image.unsqueeze(0)
    if image.shape[:2] != (1, 1):
        raise ShapeMismatch("Expected a single grayscale image, got shape {}.".format(tuple(image.shape)))
    text = torch.as_tensor(np.asarray(text, dtype=np.float64), dtype=dtype).reshape(1, -1)
    return image, text


def grad_cam_all(model, image, text, stages=None):
    """
    Compute Grad-CAM maps for several decoder stages in a single forward and backward pass.

    Parameters
    ----------
    model : C2fvlNet
        The model; evaluated in eval mode, parameters are not modified and no parameter gradients are accumulated.
    image : array_like
        One image, `(H, W)`, `(1, H, W)` or `(1, 1, H, W)`.
    text : array_like
        The image's 8-dimensional text vector.
    stages : sequence of int, optional
        Decoder stages (default: all, deepest first).

    Returns
    -------
    list
        One ``SaliencyMap`` per stage, in the order of ``stages``.

    Raises
    ------
    InvalidStage
        If a stage is out of range.
    """
    stages = list(range(model.num_stages, 0, -1)) if stages is None else list(stages)
    for stage in stages:
        validate_stage(model, stage)
    image, text = _prepare(model, image, text)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad(), GradCAM(model, stages) as cam:
            activations, gradients = cam(image, text)
    finally:
        model.train(was_training)

    maps = []
    for stage, a, g in zip(stages, activations, gradients):
        heat, is_zero = normalize_map(weighted_activation_map(a[0], g[0]))
        maps.append(SaliencyMap(stage=stage, heatmap=heat, is_zero=is_zero, image_shape=tuple(image.shape[-2:])))
    return maps


def grad_cam(model, image, text, stage):
    """
    Compute the Grad-CAM map of one decoder stage (1 to S); see ``grad_cam_all``.
    """
    return grad_cam_all(model, image, text, [stage])[0]


def saliency_mass_in_boxes(saliency, boxes, dilation=4):
    """
    Fraction of a saliency map's mass inside the union of the given boxes, each dilated by ``dilation`` pixels.

    Parameters
    ----------
    saliency : SaliencyMap
        The map; it is upsampled to its image shape first.
    boxes : sequence
        Half-open boxes `(row0, row1, col0, col1)` in image coordinates.
    dilation : int, optional
        Margin added on every side of every box (default: 4).

    Returns
    -------
    float
        Mass fraction in [0, 1]; 0 for a zero map.
    """
    heat = saliency.upsampled()
    total = float(heat.sum())
    if total <= 0:
        return 0.0
    inside = np.zeros(heat.shape, dtype=bool)
    for r0, r1, c0, c1 in boxes:
        inside[max(0, r0 - dilation):r1 + dilation, max(0, c0 - dilation):c1 + dilation] = True
    return float(heat[inside].sum()) / total
