"""
Surrogacy decision rules.

Criteria implementations share the SurrogacyCriteria interface; the
factory picks one from the criteria config. Only the i2TEAMM rule set
ships.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

from core.config import CriteriaConfig
from core.exceptions import ClassificationError, ConfigError, DomainError
from estimation.results import Estimate

logger = logging.getLogger(__name__)


class VerdictClass(str, Enum):
    FVS = "FVS"
    RLS = "RLS"
    NOT_ESTABLISHED = "NotEstablished"


@dataclass(frozen=True)
class SurrogacyEstimates:
    """Trial-level R2 estimates and the global odds ratio, each with a 95% interval."""

    r2_copula: Estimate
    r2_wls: Estimate
    global_or: Estimate
    r2_adj: Optional[Estimate] = None
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("r2_copula", "r2_wls", "global_or", "r2_adj"):
            e = getattr(self, name)
            if e is not None and e.complete and not e.lo <= e.est <= e.hi:
                raise DomainError(f"{name} interval ({e.lo}, {e.hi}) does not contain {e.est}")


@dataclass(frozen=True)
class RuleEvaluation:
    rule: str
    operands: Dict[str, Any]
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {'rule': self.rule, 'operands': self.operands, 'passed': self.passed}


@dataclass(frozen=True)
class Verdict:
    classification: VerdictClass
    rationale: Tuple[RuleEvaluation, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, Any]:
        return {'class': self.classification.value, 'rationale': [r.to_dict() for r in self.rationale]}


class SurrogacyCriteria(ABC):
    """Interface for a surrogacy rule set."""

    name = "abstract"

    def __init__(self, config: CriteriaConfig):
        self.config = config

    @abstractmethod
    def classify(self, est: SurrogacyEstimates) -> Verdict:
        """Classify one estimates record, recording every clause evaluated."""

    @staticmethod
    def _require_complete(est: SurrogacyEstimates):
        missing = [n for n in ("r2_copula", "r2_wls", "global_or") if not getattr(est, n).complete]
        if missing:
            raise ClassificationError(f"missing estimate or interval for: {', '.join(missing)}")


class I2TeammCriteria(SurrogacyCriteria):
    """
    Fully validated: one R2 above 0.8, neither below 0.7, the qualifying
    R2's lower limit above 0.6, and OR above 3 with lower limit above 1.
    Reasonably likely: the same R2 branch with lower limit above 0.5, or
    the OR branch alone.
    """

    name = "i2teamm"

    def _r2_lower_clause(self, est: SurrogacyEstimates, bound: float) -> Tuple[bool, Dict[str, Any]]:
        cfg = self.config
        pair = {'r2_wls': est.r2_wls, 'r2_copula': est.r2_copula}
        if cfg.cl_applies_to == "both":
            tested = list(pair)
        elif cfg.cl_applies_to == "either":
            tested = list(pair)
        else:
            # the estimate(s) that crossed the threshold; the larger one when neither did
            tested = [k for k, e in pair.items() if e.est > cfg.r2_threshold]
            if not tested:
                tested = [max(pair, key=lambda k: pair[k].est)]
        lowers = {k: pair[k].lo for k in tested}
        checks = [lo > bound for lo in lowers.values()]
        passed = all(checks) if cfg.cl_applies_to == "both" else any(checks)
        return passed, {'lower_limits': lowers, 'bound': bound, 'applies_to': cfg.cl_applies_to}

    def classify(self, est: SurrogacyEstimates) -> Verdict:
        self._require_complete(est)
        cfg = self.config
        r2_max = max(est.r2_wls.est, est.r2_copula.est)
        r2_min = min(est.r2_wls.est, est.r2_copula.est)
        odds = est.global_or

        rationale: List[RuleEvaluation] = []

        def rule(rule_id: str, passed: bool, **operands) -> bool:
            rationale.append(RuleEvaluation(rule_id, operands, bool(passed)))
            return bool(passed)

        r2_high = rule("r2_max_above_threshold", r2_max > cfg.r2_threshold,
                       r2_max=r2_max, threshold=cfg.r2_threshold)
        r2_floor = rule("r2_min_not_below_floor", r2_min >= cfg.r2_floor, r2_min=r2_min, floor=cfg.r2_floor)
        passed, ops = self._r2_lower_clause(est, cfg.fvs_r2_lower)
        fvs_lower = rule("fvs_r2_lower_limit", passed, **ops)
        or_high = rule("or_above_threshold", odds.est > cfg.or_threshold, global_or=odds.est,
                       threshold=cfg.or_threshold)
        or_lower = rule("or_lower_limit", odds.lo > cfg.or_lower, lower_limit=odds.lo, bound=cfg.or_lower)
        passed, ops = self._r2_lower_clause(est, cfg.rls_r2_lower)
        rls_lower = rule("rls_r2_lower_limit", passed, **ops)

        or_branch = or_high and or_lower
        fvs = r2_high and r2_floor and fvs_lower and or_branch
        rls_r2_branch = r2_high and rls_lower and r2_floor
        rule("fvs", fvs)
        rule("rls_r2_branch", rls_r2_branch)
        rule("rls_or_branch", or_branch)

        if fvs:
            cls = VerdictClass.FVS
        elif rls_r2_branch or or_branch:
            cls = VerdictClass.RLS
        else:
            cls = VerdictClass.NOT_ESTABLISHED
        return Verdict(cls, tuple(rationale))


_RULE_SETS = {I2TeammCriteria.name: I2TeammCriteria}


def create_criteria(config: Optional[CriteriaConfig] = None) -> SurrogacyCriteria:
    """Factory function returning the configured rule set."""
    config = config or CriteriaConfig()
    try:
        return _RULE_SETS[config.rule_set](config)
    except KeyError:
        raise ConfigError(f"unknown rule set {config.rule_set!r}")


def classify(est: SurrogacyEstimates, config: Optional[CriteriaConfig] = None) -> Verdict:
    return create_criteria(config).classify(est)


def acceptance_rates(verdicts: Sequence[Verdict]) -> Tuple[float, float]:
    """(percent FVS, percent RLS or better)."""
    if not verdicts:
        raise DomainError("acceptance rates need at least one verdict")
    n = len(verdicts)
    fvs = sum(v.classification == VerdictClass.FVS for v in verdicts)
    rls = sum(v.classification == VerdictClass.RLS for v in verdicts)
    return 100.0 * fvs / n, 100.0 * (fvs + rls) / n
