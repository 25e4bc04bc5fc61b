"""Simulation harness and the shared estimation pipeline."""

from . import pipeline, sim_harness

__all__ = ['pipeline', 'sim_harness']
