#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from setuptools import setup

setup(
    name="c2fvl",
    version="0.1.202610181200",
    description="coarse-to-fine lesion segmentation guided by lesion reports (2D)",
    long_description="See DESIGN.md in the project folder.",
    packages=["c2fvl"],
    license="MIT License",
    python_requires='>=3.8',
    install_requires=["numpy", "torch", "Pillow", "tqdm"],
    entry_points={
        'console_scripts': ["c2fvl=c2fvl.cli:main"],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
    ],
)
