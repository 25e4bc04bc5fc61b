"""Copula families used by the workbench."""

from . import plackett

__all__ = ['plackett']
