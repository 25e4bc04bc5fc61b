"""Utility modules for surrobench."""

from . import io_utils
from . import rng_utils

__all__ = ['io_utils', 'rng_utils']
