#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Training objectives: Dice loss, binary cross-entropy, the inter-layer cosine alignment loss between VLAB outputs, and
the composite objectives

    V1:    ½ L_Dice + ½ L_CE + α L_{4,1} + β L_{4,2} + γ L_{4,3}    (reference: deepest VLAB output, others downsampled)
    V2:    ½ L_Dice + ½ L_CE + α L_{1,4} + β L_{1,3} + γ L_{1,2}    (reference: shallowest VLAB output, others upsampled)
    plain: ½ L_Dice + ½ L_CE

Because VLAB outputs of different stages have different channel counts, the cosine loss compares channel-mean maps:
each map is averaged over its channels, the non-reference map is resampled to the reference's spatial shape (average
pooling downward, nearest-neighbor upward), and both are flattened per sample.
"""

from dataclasses import dataclass, field
import logging
from typing import NamedTuple

import torch
import torch.nn.functional as F

from c2fvl.errors import ShapeMismatch


logger = logging.getLogger(__name__)

VARIANTS = ("V1", "V2", "plain")

#: For each variant, the (reference layer, other layer) pairs weighted by alpha, beta, and gamma (1-based).
LAYER_PAIRS = {"V1": ((4, 1), (4, 2), (4, 3)),
               "V2": ((1, 4), (1, 3), (1, 2))}


@dataclass
class LossConfig:
    """
    Parameters
    ----------
    alpha, beta, gamma : float
        Non-negative cosine-term coefficients (default: 0.5 each).
    variant : str
        "V2" (default), "V1", or "plain".
    smooth : float
        Smoothing term of the Dice loss.
    eps : float
        Probabilities are clipped to `[eps, 1 - eps]` for the cross-entropy.
    """
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5
    variant: str = "V2"
    smooth: float = 1e-6
    eps: float = 1e-7

    def validate(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError("{} must be non-negative, not {}.".format(name, getattr(self, name)))
        if self.variant not in VARIANTS:
            raise ValueError("Unknown loss variant {!r} (expected one of {}).".format(self.variant, VARIANTS))
        if self.smooth <= 0:
            raise ValueError("smooth must be positive, not {}.".format(self.smooth))
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must be in (0, 0.5), not {}.".format(self.eps))

    @property
    def coefficients(self):
        return self.alpha, self.beta, self.gamma


class CosineTerm(NamedTuple):
    """A cosine alignment loss value and whether the zero-norm guard was hit for any sample."""
    loss: torch.Tensor
    zero_vector: bool


@dataclass
class LossBundle:
    """
    All terms of one loss evaluation (tensors, differentiable).

    ``total = ½ l_dice + ½ l_ce + α cosine_terms[0] + β cosine_terms[1] + γ cosine_terms[2]`` (cosine terms weighted by
    zero for the "plain" variant).
    """
    l_dice: torch.Tensor
    l_ce: torch.Tensor
    cosine_terms: tuple
    total: torch.Tensor
    zero_vector_flags: tuple = field(default=(False, False, False))

    def as_floats(self):
        """
        Return the terms as a dict of Python floats with keys "loss_total", "loss_dice", "loss_ce", "cos1" to "cos3".
        """
        values = {"loss_total": self.total, "loss_dice": self.l_dice, "loss_ce": self.l_ce}
        for k, term in enumerate(self.cosine_terms, start=1):
            values["cos{}".format(k)] = term
        return {key: value.detach().item() for key, value in values.items()}

    def named_terms(self):
        """
        Yield `(name, tensor)` pairs of all terms, the total last.
        """
        yield "l_dice", self.l_dice
        yield "l_ce", self.l_ce
        for k, term in enumerate(self.cosine_terms, start=1):
            yield "cos{}".format(k), term
        yield "total", self.total


def _check_shapes(probs, gt):

    if probs.shape != gt.shape:
        raise ShapeMismatch("Prediction shape {} does not match ground-truth shape {}.".format(
            tuple(probs.shape), tuple(gt.shape)))


def _per_sample(x):

    return x.reshape(x.shape[0], -1) if x.dim() > 1 else x.reshape(1, -1)


def dice_loss(probs, gt, smooth=1e-6):
    """
    Soft Dice loss `1 - (2 Σ p g + smooth) / (Σ p + Σ g + smooth)`, computed per sample (first axis) and averaged.
    One-dimensional inputs count as a single sample.
    """
    _check_shapes(probs, gt)
    p, g = _per_sample(probs), _per_sample(gt.to(probs.dtype))
    dice = (2 * (p * g).sum(dim=1) + smooth) / (p.sum(dim=1) + g.sum(dim=1) + smooth)
    return (1 - dice).mean()


def ce_loss(probs, gt, eps=1e-7):
    """
    Binary cross-entropy `mean(-[g log p + (1 - g) log(1 - p)])` with `p` clipped to `[eps, 1 - eps]`.
    """
    _check_shapes(probs, gt)
    p = probs.clamp(eps, 1 - eps)
    g = gt.to(probs.dtype)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()


def resample(y, shape, mode):
    """
    Resample `(B, C, h, w)` maps to the spatial ``shape``: "down" by average pooling, "up" by nearest neighbor.
    """
    h, w = y.shape[-2:]
    if mode == "down":
        if h < shape[0] or w < shape[1] or h % shape[0] or w % shape[1]:
            raise ShapeMismatch("Cannot average-pool shape {} to {}.".format((h, w), tuple(shape)))
        return F.avg_pool2d(y, kernel_size=(h // shape[0], w // shape[1]))
    if mode == "up":
        if h > shape[0] or w > shape[1] or shape[0] % h or shape[1] % w:
            raise ShapeMismatch("Cannot upsample shape {} to {}.".format((h, w), tuple(shape)))
        return F.interpolate(y, size=tuple(shape), mode="nearest")
    raise ValueError("Unknown resampling mode {!r}.".format(mode))


def cosine_align_loss(y_a, y_b, mode):
    """
    Cosine alignment loss between a reference VLAB output and another one.

    Parameters
    ----------
    y_a : torch.Tensor
        Reference map `(B, C_a, h_a, w_a)`.
    y_b : torch.Tensor
        Other map `(B, C_b, h_b, w_b)`; resampled to `(h_a, w_a)` according to ``mode``.
    mode : str
        "down" (``y_b`` is shallower and gets average-pooled) or "up" (``y_b`` is deeper and gets upsampled).

    Returns
    -------
    CosineTerm
        `1 - cos(a, b)` averaged over the batch, in [0, 2], where `a` and `b` are the flattened channel-mean maps. A
        sample where either vector has zero norm contributes a loss of 1 and sets ``zero_vector``.
    """
    if y_a.dim() != 4 or y_b.dim() != 4 or y_a.shape[0] != y_b.shape[0]:
        raise ShapeMismatch("Cannot compare maps of shapes {} and {}.".format(tuple(y_a.shape), tuple(y_b.shape)))
    a = y_a.mean(dim=1, keepdim=True).flatten(1)
    b = resample(y_b.mean(dim=1, keepdim=True), y_a.shape[-2:], mode).flatten(1)
    dot = (a * b).sum(dim=1)
    norms_sq = (a * a).sum(dim=1) * (b * b).sum(dim=1)
    valid = norms_sq > 0
    cosine = dot / torch.sqrt(torch.where(valid, norms_sq, torch.ones_like(norms_sq)))
    loss = torch.where(valid, 1 - cosine, torch.ones_like(cosine))
    # Rounding may push |cos| marginally above one
    loss = loss.clamp(0.0, 2.0)
    return CosineTerm(loss=loss.mean(), zero_vector=not bool(valid.all()))


def cosine_terms(vlab_outputs, variant):
    """
    Compute the three cosine terms of the given variant ("V1" or "V2") from exactly four VLAB outputs.

    Returns
    -------
    list
        Three ``CosineTerm`` values, in coefficient order (alpha, beta, gamma).
    """
    if len(vlab_outputs) != 4:
        raise ShapeMismatch("The cosine terms need exactly 4 VLAB outputs, got {}.".format(len(vlab_outputs)))
    mode = "down" if variant == "V1" else "up"
    return [cosine_align_loss(vlab_outputs[ref - 1], vlab_outputs[other - 1], mode)
            for ref, other in LAYER_PAIRS[variant]]


def total_loss(probs, gt, vlab_outputs, cfg=None):
    """
    Evaluate the composite objective.

    Parameters
    ----------
    probs : torch.Tensor
        Predicted foreground probabilities `(B, 1, H, W)`.
    gt : torch.Tensor
        Binary ground truth of the same shape.
    vlab_outputs : sequence of torch.Tensor
        The VLAB outputs `y_1` to `y_4`, shallow to deep. For the "plain" variant, any number is accepted and the
        cosine terms are only computed (for logging) if there are exactly four.
    cfg : LossConfig, optional
        Coefficients and variant (default: ``LossConfig()``).

    Returns
    -------
    LossBundle
        All terms and the total.
    """
    cfg = LossConfig() if cfg is None else cfg
    cfg.validate()
    l_dice = dice_loss(probs, gt, smooth=cfg.smooth)
    l_ce = ce_loss(probs, gt, eps=cfg.eps)
    total = 0.5 * l_dice + 0.5 * l_ce

    if cfg.variant == "plain":
        if len(vlab_outputs) == 4:
            with torch.no_grad():
                terms = cosine_terms(vlab_outputs, "V2")
        else:
            zero = torch.zeros((), dtype=probs.dtype, device=probs.device)
            terms = [CosineTerm(zero, False)] * 3
    else:
        terms = cosine_terms(vlab_outputs, cfg.variant)
        for coefficient, term in zip(cfg.coefficients, terms):
            total = total + coefficient * term.loss

    flags = tuple(term.zero_vector for term in terms)
    if any(flags):
        logger.warning("Zero-norm channel-mean map in cosine term(s) %s; using loss 1.",
                       [k + 1 for k, flag in enumerate(flags) if flag])
    return LossBundle(l_dice=l_dice, l_ce=l_ce, cosine_terms=tuple(term.loss for term in terms), total=total,
                      zero_vector_flags=flags)
