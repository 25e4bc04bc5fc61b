"""First-stage (marginal and joint copula) and second-stage (trial-level) estimation."""

from . import joint_copula, marginal, results, trial_level

__all__ = ['joint_copula', 'marginal', 'results', 'trial_level']
