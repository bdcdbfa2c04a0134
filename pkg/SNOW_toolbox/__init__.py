"""Top-level package for SNOW_toolbox Repo."""
import logging

__author__ = """SNOW toolbox developers"""
__email__ = 'snow-toolbox@users.noreply.github.com'
__version__ = '1.0.0'

logging.getLogger(__name__).addHandler(logging.NullHandler())
