#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
A module for reading and writing the 8-bit PNG files of c2fvl datasets and outputs, basically a wrapper for calls on
the Pillow library [PNG1]_.

In memory, images are float arrays with values in [0, 1] and masks are arrays of zeros and ones. On disk, both are
single-channel 8-bit PNGs: images as `round(255 * value)`, masks as 0/255.

References
----------
.. [PNG1] https://pillow.readthedocs.io/ (20260301)
"""

import logging

import numpy as np
from PIL import Image


logger = logging.getLogger(__name__)


def to_uint8(data):
    """
    Quantize a float array with values in [0, 1] to 8 bits (values outside are clipped).
    """
    data = np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0)
    return np.round(data * 255).astype(np.uint8)


def quantize(data):
    """
    Return the float array that results from saving the given image and loading it again.
    """
    return to_uint8(data).astype(np.float64) / 255


def _read(path, verbose):

    try:
        with Image.open(str(path)) as src_object:
            if verbose:
                logger.info("Loading image: %s (mode %s, size %s)", path, src_object.mode, src_object.size)
            data = np.asarray(src_object.convert("L"), dtype=np.uint8)
    except Exception as e:
        raise IOError(e)
    return data


def open_image(path, verbose=False):
    """
    Open a grayscale PNG image at the given path.

    Parameters
    ----------
    path : str or pathlib.Path
        The path of the file to be loaded.
    verbose : bool, optional
        If `True`, log some meta data of the loaded file (default: `False`).

    Returns
    -------
    numpy.ndarray
        2D float64 array with values in [0, 1].

    Raises
    ------
    IOError
        If something goes wrong.
    """
    return _read(path, verbose).astype(np.float64) / 255


def open_mask(path, verbose=False):
    """
    Open a binary mask PNG at the given path; pixels of 128 and more are foreground.

    Returns
    -------
    numpy.ndarray
        2D uint8 array of zeros and ones.
    """
    return (_read(path, verbose) >= 128).astype(np.uint8)


def save_image(path, data):
    """
    Save the given 2D float array (values in [0, 1]) as an 8-bit grayscale PNG.
    """
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("Cannot save array of shape {} as a grayscale image!".format(data.shape))
    Image.fromarray(to_uint8(data)).save(str(path), format="PNG")


def save_mask(path, mask):
    """
    Save the given 2D binary mask as a 0/255 PNG.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("Cannot save array of shape {} as a mask!".format(mask.shape))
    Image.fromarray(np.where(mask != 0, 255, 0).astype(np.uint8)).save(str(path), format="PNG")


def resize_nearest(data, shape):
    """
    Nearest-neighbor resize of a 2D array to the given shape; integer factors repeat pixels exactly.
    """
    data = np.asarray(data)
    rows = (np.arange(shape[0]) * data.shape[0]) // shape[0]
    cols = (np.arange(shape[1]) * data.shape[1]) // shape[1]
    return data[rows[:, np.newaxis], cols[np.newaxis, :]]


def heat_colors(heat):
    """
    Map a 2D array with values in [0, 1] to RGB with a black-red-yellow-white ramp.
    """
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.clip(3 * heat, 0, 1), np.clip(3 * heat - 1, 0, 1), np.clip(3 * heat - 2, 0, 1)], axis=-1)
    return rgb


def save_heatmap(path, heat, shape=None):
    """
    Save a saliency map (values in [0, 1]) as an RGB heatmap PNG, optionally upsampled to ``shape``.
    """
    heat = np.asarray(heat)
    if shape is not None:
        heat = resize_nearest(heat, shape)
    Image.fromarray(to_uint8(heat_colors(heat))).save(str(path), format="PNG")


def save_overlay(path, image, heat, alpha=0.5):
    """
    Save the heatmap blended over the grayscale image as an RGB PNG. The heatmap is upsampled to the image's shape.
    """
    image = np.asarray(image, dtype=np.float64)
    heat = resize_nearest(np.asarray(heat), image.shape)
    gray = np.repeat(image[..., np.newaxis], 3, axis=-1)
    weight = alpha * np.clip(heat, 0, 1)[..., np.newaxis]
    blended = (1 - weight) * gray + weight * heat_colors(heat)
    Image.fromarray(to_uint8(blended)).save(str(path), format="PNG")
