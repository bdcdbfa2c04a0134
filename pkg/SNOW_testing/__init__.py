# -*- coding: utf-8 -*-
"""Test suite of the SNOW toolbox."""

__author__ = """SNOW toolbox developers"""
__email__ = 'snow-toolbox@users.noreply.github.com'
