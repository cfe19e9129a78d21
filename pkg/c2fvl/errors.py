#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Exceptions raised by c2fvl.

Every error derives from ``C2fvlError`` and, in addition, from the builtin exception that describes the same kind of
problem (``ValueError``, ``IOError``, ``ArithmeticError``), so callers may catch either.
"""


class C2fvlError(Exception):
    """Base class of all c2fvl errors."""


# Report codec

class ReportError(C2fvlError, ValueError):
    """Base class for problems with lesion reports and text vectors."""


class UnparseableReport(ReportError):
    """The report text does not follow the lesion report grammar."""


class InconsistentReport(ReportError):
    """The report parses, but its parts contradict each other (e.g. "bilateral" with one lung only)."""


class InvalidVector(ReportError):
    """A text vector violates the layout or consistency rules of the 8-dimensional encoding."""


# Shapes

class ShapeMismatch(C2fvlError, ValueError):
    """Array or tensor shapes do not fit together."""


class ChannelsNotDivisibleBy8(ShapeMismatch):
    """A channel count cannot hold whole copies of the 8-dimensional text vector."""


class ReductionNotDividing(ShapeMismatch):
    """The VLAB reduction ratio does not divide the channel count."""


class DataShapeError(ShapeMismatch):
    """A dataset sample does not fit the model (size not divisible by ``2**S``, wrong rank, ...)."""


# Data

class InfeasiblePlacement(C2fvlError, ValueError):
    """The synthetic generator cannot place the requested lesions (zones exhausted)."""


class CorruptIndex(C2fvlError, IOError):
    """A dataset directory's report index is inconsistent with its image files."""


# Training, saliency, configuration

class NonFiniteLoss(C2fvlError, ArithmeticError):
    """
    A loss term or gradient became NaN or infinite.

    Parameters
    ----------
    term : str
        Name of the offending term (e.g. "l_dice", "cos2", "grad:encoder.stages.0.conv.0.weight").
    round_ : int
        The optimization round in which it happened.
    """

    def __init__(self, term, round_):
        super().__init__("Non-finite value in {} at round {}.".format(term, round_))
        self.term = term
        self.round = round_


class InvalidStage(C2fvlError, ValueError):
    """A decoder stage index outside ``1..S``."""


class ConfigError(C2fvlError, ValueError):
    """Missing config file, unknown key, or malformed value."""


class GridTooLarge(ConfigError):
    """A sweep grid has more cells than the configured cap."""
