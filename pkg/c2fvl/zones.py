#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Lung fields and lung zones on a square 2D image: where the "upper middle left lung" of a report is in pixel terms.

Two orientation conventions are supported. In the "radiological" convention (default), the patient's left lung is
displayed on the image's *right* half, as on chest X-rays and axial CT slices; in the "anatomical" convention, the
patient's left lung is on the image's left half.
"""

import numpy as np


#: The two lungs, in text vector order.
LUNGS = ("left", "right")
#: The three zones of each lung, in text vector order.
ZONES = ("upper", "middle", "lower")
#: For each lung, return the other one.
opposites = {"left": "right", "right": "left"}
#: Supported orientation conventions.
CONVENTIONS = ("radiological", "anatomical")


def validate_convention(convention):
    """
    Raise a ``ValueError`` if the given convention is not one of ``CONVENTIONS``.
    """
    if convention not in CONVENTIONS:
        raise ValueError("Unknown orientation convention {!r} (expected one of {}).".format(convention, CONVENTIONS))


def image_half(lung, convention="radiological"):
    """
    Determine on which half of the image the given lung is displayed.

    Parameters
    ----------
    lung : str
        Either "left" or "right" (the *patient's* side, as written in reports).
    convention : str, optional
        Either "radiological" (default) or "anatomical".

    Returns
    -------
    int
        0 for the image's left half (low column indices), 1 for its right half.
    """
    validate_convention(convention)
    if lung not in LUNGS:
        raise ValueError("Unknown lung {!r}.".format(lung))
    side = LUNGS.index(lung)
    return 1 - side if convention == "radiological" else side


def margin(size):
    """
    Return the margin (in pixels) between the image border (and the midline) and the lung fields.
    """
    return max(1, size // 16)


def lung_field_box(size, lung, convention="radiological"):
    """
    Get the box of the given lung's field on a ``size``×``size`` image.

    The lung fields are the two image halves, inset by ``margin(size)`` on all sides (so that there is a gap of twice
    the margin between the two lungs).

    Parameters
    ----------
    size : int
        Edge length of the square image.
    lung : str
        Either "left" or "right".
    convention : str, optional
        Either "radiological" (default) or "anatomical".

    Returns
    -------
    tuple
        Half-open box `(row0, row1, col0, col1)`.
    """
    m = margin(size)
    half = size // 2
    if image_half(lung, convention) == 0:
        return m, size - m, m, half - m
    return m, size - m, half + m, size - m


def zone_edges(row0, row1):
    """
    Split the half-open row range `[row0, row1)` into three consecutive parts; return the four edges.
    """
    h = row1 - row0
    return tuple(row0 + (h * k) // 3 for k in range(4))


def zone_box(size, lung, zone, convention="radiological"):
    """
    Get the box of the given zone (upper, middle, or lower third) of the given lung's field.

    Returns
    -------
    tuple
        Half-open box `(row0, row1, col0, col1)`.
    """
    if zone not in ZONES:
        raise ValueError("Unknown zone {!r}.".format(zone))
    r0, r1, c0, c1 = lung_field_box(size, lung, convention)
    edges = zone_edges(r0, r1)
    k = ZONES.index(zone)
    return edges[k], edges[k + 1], c0, c1


def vector_slot(lung, zone):
    """
    Return the index (2 to 7) of the given lung zone's indicator in the 8-dimensional text vector.
    """
    return 2 + 3 * LUNGS.index(lung) + ZONES.index(zone)


def mirror_box(size, box):
    """
    Reflect the given half-open box across the image's vertical midline.
    """
    r0, r1, c0, c1 = box
    return r0, r1, size - c1, size - c0


def box_mask(size, box):
    """
    Return a boolean ``size``×``size`` array that is `True` inside the given half-open box.
    """
    r0, r1, c0, c1 = box
    mask = np.zeros((size, size), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def zone_occupancy(mask, convention="radiological"):
    """
    Find the lung zones that contain at least one foreground pixel of the given mask.

    Parameters
    ----------
    mask : array_like
        Square 2D array; nonzero values count as foreground.
    convention : str, optional
        Either "radiological" (default) or "anatomical".

    Returns
    -------
    set
        Set of `(lung, zone)` tuples.
    """
    mask = np.asarray(mask) != 0
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError("Cannot handle mask of shape {}!".format(mask.shape))
    size = mask.shape[0]
    occupied = set()
    for lung in LUNGS:
        for zone in ZONES:
            r0, r1, c0, c1 = zone_box(size, lung, zone, convention)
            if mask[r0:r1, c0:c1].any():
                occupied.add((lung, zone))
    return occupied


def inside_lung_fields(mask, convention="radiological"):
    """
    Check whether all foreground pixels of the given square mask lie within the two lung fields.
    """
    mask = np.asarray(mask) != 0
    size = mask.shape[0]
    fields = box_mask(size, lung_field_box(size, "left", convention)) | box_mask(size, lung_field_box(size, "right", convention))
    return not np.any(mask & ~fields)
