"""
Estimation pipeline shared by the simulation harness and the IPD fit command:
marginal fits, joint copula fit, second stage, verdict.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence
import logging

import numpy as np

from core.config import CriteriaConfig, EstimatorConfig
from estimation.joint_copula import JointFitResult, fit_joint
from estimation.marginal import MarginalFits, fit_marginals
from estimation.results import Estimate
from estimation.trial_level import TrialLevelResult, estimate_trial_level
from synthesis.trial_synthesizer import TrialDataset, TrialEffects
from verdict.criteria import SurrogacyEstimates, Verdict, create_criteria

logger = logging.getLogger(__name__)


@dataclass
class AnalysisResult:
    marginals: List[MarginalFits]
    joint: JointFitResult
    stage_two_effects: List[TrialEffects]
    trial_level: TrialLevelResult
    estimates: SurrogacyEstimates
    verdict: Verdict
    flags: List[str] = field(default_factory=list)


def marginal_effects(marginals: Sequence[MarginalFits]) -> List[TrialEffects]:
    """Stage-two inputs from the marginal models: logistic log-OR and Cox log-HR."""
    return [
        TrialEffects(
            gamma_i=m.logistic.gamma_hat,
            log_lambda0_i=m.exponential.log_lambda0_hat,
            alpha_i=m.logistic.alpha_hat,
            beta_i=m.cox.beta_hat,
            se_alpha=m.logistic.se_alpha,
            se_beta=m.cox.se_beta,
            trial_id=m.trial_id,
        )
        for m in marginals
    ]


def analyze_trials(
    trials: Sequence[TrialDataset],
    estimator: Optional[EstimatorConfig] = None,
    criteria: Optional[CriteriaConfig] = None,
    ci_method: str = "fisher_z",
    rng: Optional[np.random.Generator] = None,
) -> AnalysisResult:
    estimator = estimator or EstimatorConfig()
    marginals = [fit_marginals(t, estimator.ties) for t in trials]
    joint = fit_joint(trials, estimator, marginals)

    if estimator.second_stage_effects == "joint":
        effects = list(joint.per_trial)
    else:
        effects = marginal_effects(marginals)
    trial_level = estimate_trial_level(effects, [m.n for m in marginals], estimator, ci_method, rng)

    flags = list(trial_level.flags)
    zero_cells = sum(m.logistic.zero_cell_corrected for m in marginals)
    if zero_cells:
        flags.append(f"zero_cell_corrected:{zero_cells}")
    if joint.flags.get('likelihood_clamps'):
        flags.append(f"likelihood_clamps:{joint.flags['likelihood_clamps']}")
    if joint.flags.get('profile_multimodal'):
        flags.append("profile_multimodal")
    if joint.flags.get('inner_failures'):
        flags.append(f"inner_failures:{joint.flags['inner_failures']}")

    estimates = SurrogacyEstimates(
        r2_copula=trial_level.r2_copula,
        r2_wls=trial_level.r2_wls,
        global_or=Estimate(joint.theta_hat, *joint.theta_ci),
        r2_adj=trial_level.r2_adj,
        flags=tuple(flags),
    )
    verdict = create_criteria(criteria).classify(estimates)
    return AnalysisResult(marginals, joint, effects, trial_level, estimates, verdict, flags)
