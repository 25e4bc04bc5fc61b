#!/usr/bin/env python3
"""
Tests for the surrogacy decision rules.
"""

import sys
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.config import CriteriaConfig
from core.exceptions import ClassificationError, DomainError
from estimation.results import Estimate
from verdict import (
    I2TeammCriteria,
    SurrogacyEstimates,
    Verdict,
    VerdictClass,
    acceptance_rates,
    classify,
    create_criteria,
)

RANK = {VerdictClass.NOT_ESTABLISHED: 0, VerdictClass.RLS: 1, VerdictClass.FVS: 2}


def _est(wls, wls_lo, cop, or_, or_lo, cop_lo=None):
    cop_lo = cop - 0.2 if cop_lo is None else cop_lo
    return SurrogacyEstimates(
        r2_wls=Estimate(wls, wls_lo, min(1.0, wls + 0.1)),
        r2_copula=Estimate(cop, max(0.0, cop_lo), min(1.0, cop + 0.1)),
        global_or=Estimate(or_, or_lo, or_ * 2),
    )


class TestI2TeammExamples:
    """Decision cases at the default thresholds."""

    def test_fully_validated(self):
        assert classify(_est(0.85, 0.65, 0.75, 4.0, 1.5)).classification == VerdictClass.FVS

    def test_reasonably_likely_by_r2(self):
        assert classify(_est(0.85, 0.55, 0.75, 2.0, 0.9)).classification == VerdictClass.RLS

    def test_reasonably_likely_by_odds_ratio(self):
        assert classify(_est(0.60, 0.40, 0.50, 3.5, 1.2)).classification == VerdictClass.RLS

    def test_not_established(self):
        assert classify(_est(0.60, 0.40, 0.50, 2.0, 0.8)).classification == VerdictClass.NOT_ESTABLISHED

    def test_floor_blocks_fvs(self):
        """One R2 below 0.7 rules out both R2 branches."""
        verdict = classify(_est(0.85, 0.65, 0.69, 2.0, 0.9))
        assert verdict.classification == VerdictClass.NOT_ESTABLISHED

    def test_strict_thresholds(self):
        assert classify(_est(0.80, 0.65, 0.75, 3.0, 1.5)).classification == VerdictClass.NOT_ESTABLISHED


class TestRationale:
    """Every clause is recorded."""

    def test_all_rules_recorded(self):
        verdict = classify(_est(0.85, 0.65, 0.75, 4.0, 1.5))
        rules = [r.rule for r in verdict.rationale]
        assert rules == [
            "r2_max_above_threshold", "r2_min_not_below_floor", "fvs_r2_lower_limit", "or_above_threshold",
            "or_lower_limit", "rls_r2_lower_limit", "fvs", "rls_r2_branch", "rls_or_branch",
        ]
        assert all(r.passed for r in verdict.rationale)

    def test_to_dict(self):
        out = classify(_est(0.60, 0.40, 0.50, 2.0, 0.8)).to_dict()
        assert out['class'] == "NotEstablished"
        assert out['rationale'][0]['rule'] == "r2_max_above_threshold"
        assert out['rationale'][0]['passed'] is False

    def test_pure(self):
        est = _est(0.85, 0.55, 0.75, 2.0, 0.9)
        assert classify(est) == classify(est)


class TestConfidenceLimitTarget:
    """Which R2's lower limit the CL clauses test."""

    def test_max_tests_qualifying_estimate(self):
        """Copula R2 has a poor lower limit but did not cross 0.8, so it is not tested."""
        est = _est(0.85, 0.65, 0.75, 4.0, 1.5, cop_lo=0.1)
        assert classify(est).classification == VerdictClass.FVS

    def test_max_raising_second_estimate_keeps_verdict(self):
        """Both estimates above 0.8: raising the one with the weaker lower limit past the other cannot demote."""
        before = _est(0.9, 0.65, 0.85, 4.0, 1.5, cop_lo=0.55)
        after = _est(0.9, 0.65, 0.95, 4.0, 1.5, cop_lo=0.55)
        assert classify(before).classification == VerdictClass.FVS
        assert classify(after).classification == VerdictClass.FVS
        clause = next(r for r in classify(after).rationale if r.rule == "fvs_r2_lower_limit")
        assert set(clause.operands['lower_limits']) == {'r2_wls', 'r2_copula'}

    def test_both(self):
        est = _est(0.85, 0.65, 0.75, 4.0, 1.5, cop_lo=0.1)
        verdict = classify(est, CriteriaConfig(cl_applies_to="both"))
        assert verdict.classification == VerdictClass.RLS

    def test_either(self):
        est = _est(0.85, 0.3, 0.82, 2.0, 0.9, cop_lo=0.62)
        verdict = classify(est, CriteriaConfig(cl_applies_to="either"))
        assert verdict.classification == VerdictClass.RLS


class TestErrors:
    """Missing inputs and bad configuration."""

    def test_missing_interval(self):
        est = SurrogacyEstimates(
            r2_wls=Estimate(0.85, None, None),
            r2_copula=Estimate(0.75, 0.5, 0.9),
            global_or=Estimate(4.0, 1.5, 8.0),
        )
        with pytest.raises(ClassificationError):
            classify(est)

    def test_interval_must_contain_estimate(self):
        with pytest.raises(DomainError):
            SurrogacyEstimates(
                r2_wls=Estimate(0.85, 0.9, 0.95),
                r2_copula=Estimate(0.75, 0.5, 0.9),
                global_or=Estimate(4.0, 1.5, 8.0),
            )

    def test_factory(self):
        assert isinstance(create_criteria(), I2TeammCriteria)


class TestAcceptanceRates:
    """Percent FVS and percent RLS-or-better."""

    def _verdict(self, cls):
        return Verdict(cls, ())

    def test_all_fvs(self):
        assert acceptance_rates([self._verdict(VerdictClass.FVS)] * 3) == (100.0, 100.0)

    def test_mixed(self):
        verdicts = [self._verdict(c) for c in (VerdictClass.FVS, VerdictClass.RLS,
                                               VerdictClass.NOT_ESTABLISHED, VerdictClass.NOT_ESTABLISHED)]
        assert acceptance_rates(verdicts) == (25.0, 50.0)

    def test_empty(self):
        with pytest.raises(DomainError):
            acceptance_rates([])


unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
odds = st.floats(min_value=0.1, max_value=20.0, allow_nan=False)
bump = st.floats(min_value=0.0, max_value=0.5, allow_nan=False)


@st.composite
def estimates(draw):
    def interval(strategy):
        lo, est, hi = sorted(draw(strategy) for _ in range(3))
        return Estimate(est, lo, hi)
    return SurrogacyEstimates(r2_wls=interval(unit), r2_copula=interval(unit), global_or=interval(odds))


def _raise(e: Estimate, field: str, delta: float, cap: float) -> Estimate:
    if field == "est":
        est = min(e.est + delta, cap)
        return Estimate(est, e.lo, max(e.hi, est))
    return Estimate(e.est, min(e.lo + delta, e.est), e.hi)


class TestMonotonicity:
    """Raising any estimate or lower limit never demotes the verdict."""

    @pytest.mark.parametrize("cl_applies_to", ["max", "both", "either"])
    @given(est=estimates(), name=st.sampled_from(["r2_wls", "r2_copula", "global_or"]),
           field=st.sampled_from(["est", "lo"]), delta=bump)
    def test_monotone(self, cl_applies_to, est, name, field, delta):
        config = CriteriaConfig(cl_applies_to=cl_applies_to)
        before = classify(est, config).classification
        cap = 40.0 if name == "global_or" else 1.0
        changed = {n: getattr(est, n) for n in ("r2_wls", "r2_copula", "global_or")}
        changed[name] = _raise(changed[name], field, delta * (10 if name == "global_or" else 1), cap)
        after = classify(SurrogacyEstimates(**changed), config).classification
        assert RANK[after] >= RANK[before]

    @given(est=estimates())
    def test_fvs_implies_r2_branch(self, est):
        verdict = classify(est)
        if verdict.classification == VerdictClass.FVS:
            branch = next(r for r in verdict.rationale if r.rule == "rls_r2_branch")
            assert branch.passed


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
