#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import sys

from c2fvl.cli import main

sys.exit(main())
