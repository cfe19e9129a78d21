#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import itertools
import os
from pathlib import Path
import tempfile

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from c2fvl.losses import LossConfig, total_loss
from c2fvl.model import C2fvlNet, ModelConfig
from c2fvl.synth_data import SyntheticSpec, write_dataset
from c2fvl.vlab import GlobalMaxPool


def slow_tests_enabled():

    return os.environ.get("C2FVL_SLOW", "") == "1"


def tiny_model_config(**overrides):
    """
    Four stages with channels 8, 16, 24, 32 on 16×16 images.
    """
    values = dict(image_size=16, channels=(8, 16, 24, 32), token_patches=(2, 2, 1, 1), num_heads=2,
                  mlp_ratio=2.0, vlab_reduction=4)
    values.update(overrides)
    return ModelConfig(**values)


def two_stage_config(**overrides):

    values = dict(image_size=16, channels=(8, 16), token_patches=(2, 2), num_heads=2, mlp_ratio=2.0,
                  vlab_reduction=4)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(seed=0, dtype=torch.float64, **overrides):

    torch.manual_seed(seed)
    return C2fvlNet(tiny_model_config(**overrides)).to(dtype)


def tiny_spec(**overrides):

    values = dict(image_size=16, count_range=(1, 2), radius_range=(1.0, 1.5))
    values.update(overrides)
    return SyntheticSpec(**values)


def random_text_vector(rng):
    """
    A random valid text vector (at least one zone).
    """
    flags = np.zeros(6, dtype=np.int64)
    while not flags.any():
        flags = rng.integers(0, 2, size=6)
    bilateral = int(flags[:3].any() and flags[3:].any())
    count = int(rng.integers(1, 10))
    return np.concatenate([[bilateral, count], flags]).astype(np.int64)


def random_mask(rng, shape=(8, 8), p=0.3):

    return (rng.random(shape) < p).astype(np.uint8)


def generate_test_data(n_train=6, n_val=2, n_test=0, spec=None):
    """
    Returns
    -------
    tuple
        Path to a temporary directory containing a synthetic dataset (to be cleaned up after use!), and the samples
        as written.
    """
    testdata_dir = Path(tempfile.mkdtemp(prefix="c2fvl-")).resolve()
    dataset = write_dataset(testdata_dir, n_train, n_val, n_test, tiny_spec() if spec is None else spec)
    return str(testdata_dir), dataset


# Straight-line oracles (numpy, float64)

def naive_conv2d(x, weight, bias, padding=0):
    """
    Plain loop convolution of one `(C_in, H, W)` map with `(C_out, C_in, k, k)` weights.
    """
    c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    padded[:, padding:padding + h, padding:padding + w] = x
    out_h, out_w = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                total = bias[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            total += weight[o, c, di, dj] * padded[c, i + di, j + dj]
                out[o, i, j] = total
    return out


def numpy_params(module):

    return {name: p.detach().cpu().double().numpy() for name, p in module.named_parameters()}


def bn_eval(x, bn):
    """
    Batch normalization with running statistics of a `(C, H, W)` map.
    """
    mean = bn.running_mean.double().numpy()[:, None, None]
    var = bn.running_var.double().numpy()[:, None, None]
    gamma = bn.weight.detach().double().numpy()[:, None, None]
    beta = bn.bias.detach().double().numpy()[:, None, None]
    return (x - mean) / np.sqrt(var + bn.eps) * gamma + beta


def relu(x):

    return np.maximum(x, 0)


def double_conv_oracle(x, double_conv):

    conv1, bn1, _, conv2, bn2, _ = double_conv.layers
    w = numpy_params(double_conv.layers)
    x = relu(bn_eval(naive_conv2d(x, w["0.weight"], w["0.bias"], padding=1), bn1))
    return relu(bn_eval(naive_conv2d(x, w["3.weight"], w["3.bias"], padding=1), bn2))


def max_pool2_oracle(x):

    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def nearest_upsample(x, shape):
    """
    Repeat the pixels of a `(C, h, w)` map up to `(C, H, W)`, with integer factors.
    """
    return np.repeat(np.repeat(x, shape[0] // x.shape[1], axis=1), shape[1] // x.shape[2], axis=2)


def reconstruct_oracle(f_vit, f_cnn, fuse):
    """
    F_rt = ReLU(BN(Conv1x1(Upsample(F_vit)))), F_encoder = F_cnn + F_rt for one sample.
    """
    w = numpy_params(fuse)
    up = nearest_upsample(f_vit, f_cnn.shape[1:])
    projected = np.einsum("oc,chw->ohw", w["conv.weight"][:, :, 0, 0], up) + w["conv.bias"][:, None, None]
    f_rt = relu(bn_eval(projected, fuse.bn))
    return f_cnn + f_rt, f_rt


def vlab_oracle(x, vlab):
    """
    y = MLP_out(GAP(MLP_avg(x)) + GMP(MLP_max(x))) ⊗ x for one `(C, H, W)` sample.
    """
    w = numpy_params(vlab)

    def pixel_mlp(prefix):
        hidden = np.einsum("oc,chw->ohw", w[prefix + ".0.weight"][:, :, 0, 0], x) + w[prefix + ".0.bias"][:, None, None]
        hidden = relu(hidden)
        return np.einsum("oc,chw->ohw", w[prefix + ".2.weight"][:, :, 0, 0], hidden) + w[prefix + ".2.bias"][:, None, None]

    f_avg = pixel_mlp("mlp_avg").mean(axis=(1, 2))
    f_max = pixel_mlp("mlp_avg" if vlab.share_branch_mlp else "mlp_max").max(axis=(1, 2))
    z = f_avg + f_max
    s = w["mlp_out.2.weight"] @ relu(w["mlp_out.0.weight"] @ z + w["mlp_out.0.bias"]) + w["mlp_out.2.bias"]
    return s[:, None, None] * x


def dice_oracle(p, g, smooth=1e-6):

    losses = []
    for pi, gi in zip(p, g):
        losses.append(1 - (2 * np.sum(pi * gi) + smooth) / (np.sum(pi) + np.sum(gi) + smooth))
    return float(np.mean(losses))


def ce_oracle(p, g, eps=1e-7):

    p = np.clip(p, eps, 1 - eps)
    return float(np.mean(-(g * np.log(p) + (1 - g) * np.log(1 - p))))


def cosine_oracle(y_a, y_b, mode):
    """
    Batch mean of 1 - cos between the flattened channel means of `y_a` and of `y_b` resampled to `y_a`'s shape.
    """
    losses = []
    for a, b in zip(y_a, y_b):
        a_mean, b_mean = a.mean(axis=0), b.mean(axis=0)
        if mode == "down":
            fy, fx = b_mean.shape[0] // a_mean.shape[0], b_mean.shape[1] // a_mean.shape[1]
            b_mean = b_mean.reshape(a_mean.shape[0], fy, a_mean.shape[1], fx).mean(axis=(1, 3))
        else:
            b_mean = nearest_upsample(b_mean[np.newaxis], a_mean.shape)[0]
        va, vb = a_mean.ravel(), b_mean.ravel()
        norm = np.linalg.norm(va) * np.linalg.norm(vb)
        losses.append(1.0 if norm == 0 else 1 - va @ vb / norm)
    return float(np.mean(losses))


def total_loss_oracle(p, g, ys, alpha=0.5, beta=0.5, gamma=0.5, variant="V2"):

    if variant == "V1":
        terms = [cosine_oracle(ys[3], ys[0], "down"), cosine_oracle(ys[3], ys[1], "down"),
                 cosine_oracle(ys[3], ys[2], "down")]
    else:
        terms = [cosine_oracle(ys[0], ys[3], "up"), cosine_oracle(ys[0], ys[2], "up"),
                 cosine_oracle(ys[0], ys[1], "up")]
    return 0.5 * dice_oracle(p, g) + 0.5 * ce_oracle(p, g) + alpha * terms[0] + beta * terms[1] + gamma * terms[2]


# Finite-difference gradient checking

class ActivationPattern:
    """
    Records the on/off pattern of every ReLU and the selected positions of every max-pooling in a model while
    attached; two forward passes with equal patterns lie on the same differentiable piece.
    """

    def __init__(self, model):
        self.records = []
        self.handles = []
        for module in model.modules():
            if isinstance(module, (nn.ReLU, nn.MaxPool2d, GlobalMaxPool)):
                self.handles.append(module.register_forward_hook(self._record))

    def _record(self, module, inputs, output):
        x = inputs[0].detach()
        if isinstance(module, nn.ReLU):
            self.records.append(x > 0)
        elif isinstance(module, nn.MaxPool2d):
            self.records.append(F.max_pool2d(x, module.kernel_size, return_indices=True)[1])
        else:
            self.records.append(x.flatten(2).argmax(dim=2))

    def capture(self, fn):
        self.records = []
        value = fn()
        return value, list(self.records)

    def close(self):
        for handle in self.handles:
            handle.remove()


def same_pattern(first, second):

    return len(first) == len(second) and all(torch.equal(a, b) for a, b in zip(first, second))


def check_parameter_gradients(model, loss_fn, step=1e-4, n_coords=6, seed=0):
    """
    Compare autograd gradients of ``loss_fn()`` with central finite differences on a seeded sample of coordinates of
    every parameter tensor. Coordinates whose stencil changes the ReLU or max-pool pattern are skipped.

    Returns
    -------
    dict
        `(relative error, absolute error, reference norm, checked coordinates)` by parameter name.
    """
    rng = np.random.default_rng(seed)
    pattern = ActivationPattern(model)
    try:
        model.zero_grad()
        loss, base = pattern.capture(loss_fn)
        loss.backward()
        results = {}
        for name, parameter in model.named_parameters():
            analytic, numeric = [], []
            flat = parameter.data.view(-1)
            grad = parameter.grad.reshape(-1) if parameter.grad is not None else torch.zeros_like(flat)
            coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            for k in coords:
                original = flat[k].item()
                with torch.no_grad():
                    flat[k] = original + step
                    plus, plus_pattern = pattern.capture(loss_fn)
                    flat[k] = original - step
                    minus, minus_pattern = pattern.capture(loss_fn)
                    flat[k] = original
                if not (same_pattern(base, plus_pattern) and same_pattern(base, minus_pattern)):
                    continue
                numeric.append((plus.item() - minus.item()) / (2 * step))
                analytic.append(grad[k].item())
            analytic, numeric = np.asarray(analytic), np.asarray(numeric)
            error = float(np.linalg.norm(analytic - numeric))
            reference = float(max(np.linalg.norm(analytic), np.linalg.norm(numeric)))
            results[name] = (error / reference if reference > 0 else 0.0, error, reference, len(analytic))
        return results
    finally:
        pattern.close()


def model_loss_fn(model, images, masks, vectors, loss_cfg=None):
    """
    Closure evaluating the composite loss of a model on a fixed batch.
    """
    loss_cfg = LossConfig() if loss_cfg is None else loss_cfg

    def loss_fn():
        output = model(images, vectors)
        return total_loss(torch.sigmoid(output.logits), masks, output.vlab_outputs, loss_cfg).total

    return loss_fn


def zone_subsets():
    """
    All 63 nonempty subsets of the six lung zones, as `(left zones, right zones)` tuples in zone order.
    """
    zones = ("upper", "middle", "lower")
    slots = [(lung, zone) for lung in ("left", "right") for zone in zones]
    for flags in itertools.product((0, 1), repeat=6):
        if any(flags):
            chosen = [slot for slot, flag in zip(slots, flags) if flag]
            yield (tuple(z for lung, z in chosen if lung == "left"), tuple(z for lung, z in chosen if lung == "right"))
