"""Surrogacy classification."""

from .criteria import (
    I2TeammCriteria,
    RuleEvaluation,
    SurrogacyCriteria,
    SurrogacyEstimates,
    Verdict,
    VerdictClass,
    acceptance_rates,
    classify,
    create_criteria,
)

__all__ = [
    'I2TeammCriteria', 'RuleEvaluation', 'SurrogacyCriteria', 'SurrogacyEstimates', 'Verdict',
    'VerdictClass', 'acceptance_rates', 'classify', 'create_criteria',
]
