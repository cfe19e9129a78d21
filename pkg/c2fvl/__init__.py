#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
c2fvl: coarse-to-fine segmentation of lung lesions guided by the text of lesion reports.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("c2fvl")
except PackageNotFoundError:
    __version__ = "unknown"
