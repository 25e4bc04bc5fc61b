#!/usr/bin/env python3
"""
Tests for the first-stage marginal models.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from statsmodels.duration.hazard_regression import PHReg

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.exceptions import ConvergenceError, EstimationError, MonotoneLikelihoodError
from estimation import marginal
from estimation.marginal import (
    fit_cox_covariate,
    fit_cox_treatment,
    fit_exponential_ph,
    fit_logistic_treatment,
    fit_marginals,
    partial_likelihood,
)
from synthesis.trial_synthesizer import PopulationParams, TrialDataset, synthesize_study


def _table_trial(a, b, c, d):
    """Trial with the given 2x2 surrogate table: control resp/non-resp, treated resp/non-resp."""
    surrogate = [0] * a + [1] * b + [0] * c + [1] * d
    treatment = [0] * (a + b) + [1] * (c + d)
    n = len(surrogate)
    return TrialDataset("T", time=np.arange(1, n + 1, dtype=float), event=np.ones(n, bool),
                        surrogate=surrogate, treatment=treatment)


def _survival_trial(seed=0, n=200, ties=False):
    rng = np.random.default_rng(seed)
    z = np.repeat([0, 1], n // 2)
    t = rng.exponential(1.0 / (0.3 * np.exp(-0.5 * z)))
    c = rng.exponential(5.0, size=n)
    time = np.minimum(t, c)
    if ties:
        time = np.ceil(time * 4) / 4
    event = t <= c
    return TrialDataset("S", time=time, event=event, surrogate=rng.integers(0, 2, n), treatment=z)


class TestLogistic:
    """Closed-form 2x2 logistic fit."""

    def test_cross_product_ratio(self):
        """20/100 responders on control and 30/100 on treatment."""
        fit = fit_logistic_treatment(_table_trial(20, 80, 30, 70))
        assert fit.alpha_hat == pytest.approx(math.log(12 / 7), abs=1e-12)
        assert fit.gamma_hat == pytest.approx(math.log(20 / 80), abs=1e-12)
        assert not fit.zero_cell_corrected

    def test_balanced_table(self):
        fit = fit_logistic_treatment(_table_trial(10, 10, 10, 10))
        assert fit.gamma_hat == 0.0
        assert fit.alpha_hat == 0.0
        assert fit.se_alpha == pytest.approx(math.sqrt(0.4), abs=1e-12)

    def test_zero_cell_correction(self):
        fit = fit_logistic_treatment(_table_trial(0, 10, 5, 5))
        assert fit.zero_cell_corrected
        assert fit.counts == (0, 10, 5, 5)
        assert fit.alpha_hat == pytest.approx(math.log((5.5 * 10.5) / (5.5 * 0.5)))

    def test_odds_ratio_interval(self):
        fit = fit_logistic_treatment(_table_trial(20, 80, 30, 70))
        lo, hi = fit.or_ci
        assert lo < fit.odds_ratio < hi
        assert math.log(hi) - fit.alpha_hat == pytest.approx(1.959964 * fit.se_alpha, rel=1e-5)

    def test_single_arm_rejected(self):
        data = TrialDataset("T", time=[1.0, 2.0], event=[1, 1], surrogate=[0, 1], treatment=[0, 0])
        with pytest.raises(EstimationError):
            fit_logistic_treatment(data)


class TestCox:
    """Partial-likelihood Newton-Raphson against statsmodels PHReg."""

    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    def test_matches_phreg_with_ties(self, ties):
        data = _survival_trial(seed=4, ties=True)
        fit = fit_cox_treatment(data, ties)
        ref = PHReg(data.time, data.treatment.astype(float)[:, None], status=data.event.astype(int),
                    ties=ties).fit()
        assert fit.beta_hat == pytest.approx(ref.params[0], abs=1e-5)
        assert fit.se_beta == pytest.approx(ref.bse[0], rel=1e-4)

    def test_tie_methods_agree_without_ties(self):
        data = _survival_trial(seed=8)
        efron = fit_cox_treatment(data, "efron")
        breslow = fit_cox_treatment(data, "breslow")
        assert efron.beta_hat == pytest.approx(breslow.beta_hat, abs=1e-8)

    def test_score_zero_at_optimum(self):
        data = _survival_trial(seed=2)
        fit = fit_cox_treatment(data)
        _, score, info = partial_likelihood(fit.beta_hat, data.time, data.event, data.treatment)
        assert abs(score) < 1e-8
        assert fit.se_beta == pytest.approx(1.0 / math.sqrt(info))

    def test_score_matches_finite_difference(self):
        data = _survival_trial(seed=6, ties=True)
        h = 1e-6
        lp, _, _ = partial_likelihood(0.3 + h, data.time, data.event, data.treatment)
        lm, _, _ = partial_likelihood(0.3 - h, data.time, data.event, data.treatment)
        _, score, _ = partial_likelihood(0.3, data.time, data.event, data.treatment)
        assert score == pytest.approx((lp - lm) / (2 * h), abs=1e-5)

    def test_monotone_likelihood(self):
        """All events on control before any treated follow-up ends."""
        time = np.array([1, 2, 3, 4, 5, 10, 11, 12, 13, 14], dtype=float)
        event = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0], dtype=bool)
        z = np.array([0] * 5 + [1] * 5)
        data = TrialDataset("M", time=time, event=event, surrogate=np.zeros(10, int), treatment=z)
        with pytest.raises(MonotoneLikelihoodError):
            fit_cox_treatment(data)

    def test_arm_swap_negates_estimate(self):
        data = _survival_trial(seed=5, ties=True)
        swapped = TrialDataset("S", time=data.time, event=data.event, surrogate=data.surrogate,
                               treatment=1 - data.treatment)
        assert fit_cox_treatment(swapped).beta_hat == pytest.approx(-fit_cox_treatment(data).beta_hat, abs=1e-9)

    def test_identical_arms_give_zero(self):
        """Every patient appears once in each arm."""
        base = _survival_trial(seed=3, n=60, ties=True)
        data = TrialDataset("D", time=np.tile(base.time, 2), event=np.tile(base.event, 2),
                            surrogate=np.tile(base.surrogate, 2), treatment=np.repeat([0, 1], base.n))
        for ties in ("efron", "breslow"):
            assert fit_cox_treatment(data, ties).beta_hat == pytest.approx(0.0, abs=1e-12)

    def test_halving_recovers_from_overshoot(self, monkeypatch):
        """A first Newton step far outside the trust bound is halved back, not reported as divergence."""
        data = _survival_trial(seed=4)
        expected = fit_cox_treatment(data).beta_hat
        original = marginal._RiskSets.evaluate

        def shrunken_information(self, beta, ties):
            loglik, score, info = original(self, beta, ties)
            if beta == 0.0:
                return loglik, score, abs(score) / 50.0
            return loglik, score, info

        monkeypatch.setattr(marginal._RiskSets, "evaluate", shrunken_information)
        assert fit_cox_treatment(data).beta_hat == pytest.approx(expected, abs=1e-8)

    def test_exhausted_halving_raises(self, monkeypatch):
        data = _survival_trial(seed=4)
        original = marginal._RiskSets.evaluate

        def no_ascent(self, beta, ties):
            if beta == 0.0:
                return original(self, beta, ties)
            return -np.inf, 0.0, 1.0

        monkeypatch.setattr(marginal._RiskSets, "evaluate", no_ascent)
        with pytest.raises(ConvergenceError, match="halving"):
            fit_cox_treatment(data)

    def test_no_events(self):
        data = TrialDataset("N", time=[1.0, 2.0, 3.0, 4.0], event=[0, 0, 0, 0],
                            surrogate=[0, 1, 0, 1], treatment=[0, 1, 0, 1])
        with pytest.raises(EstimationError):
            fit_cox_treatment(data)

    def test_surrogate_covariate(self):
        data = _survival_trial(seed=1)
        fit = fit_cox_covariate(data, "surrogate")
        assert fit.covariate == "surrogate"
        lo, hi = fit.hr_ci
        assert lo < fit.hazard_ratio < hi


def _brute_force_loglik(beta, time, event, x, ties):
    """Partial likelihood summed tie group by tie group."""
    total = 0.0
    for t in np.unique(time[event]):
        dead = (time == t) & event
        at_risk = time >= t
        d = int(dead.sum())
        risk_sum = np.sum(np.exp(beta * x[at_risk]))
        tied_sum = np.sum(np.exp(beta * x[dead]))
        total += beta * np.sum(x[dead])
        for k in range(d):
            frac = k / d if ties == "efron" else 0.0
            total -= math.log(risk_sum - frac * tied_sum)
    return total


class TestPartialLikelihoodOracle:
    """Vectorised risk sets against a per-group loop on a small tied trial."""

    TIME = np.array([1, 1, 2, 2, 2, 3, 4, 4, 5, 5, 6, 6, 6, 7, 8, 8, 9, 10, 10, 11], dtype=float)
    EVENT = np.array([1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 1], dtype=bool)
    X = np.array([0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 1, 0, 1, 0, 1, 1, 0], dtype=float)

    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    @pytest.mark.parametrize("beta", [-0.7, 0.0, 0.4])
    def test_loglik_matches(self, ties, beta):
        loglik, _, _ = partial_likelihood(beta, self.TIME, self.EVENT, self.X, ties)
        assert loglik == pytest.approx(_brute_force_loglik(beta, self.TIME, self.EVENT, self.X, ties), rel=1e-12)

    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    def test_estimate_maximizes_oracle(self, ties):
        data = TrialDataset("O", time=self.TIME, event=self.EVENT, surrogate=np.zeros(20, int),
                            treatment=self.X.astype(int))
        beta = fit_cox_treatment(data, ties).beta_hat
        at = _brute_force_loglik(beta, self.TIME, self.EVENT, self.X, ties)
        for h in (-1e-3, 1e-3):
            assert _brute_force_loglik(beta + h, self.TIME, self.EVENT, self.X, ties) < at


class TestExponential:
    """Per-arm exponential rates."""

    def test_rate_ratio(self):
        """Control 10 events over 100 person-years, treated 5 over 100."""
        time = np.full(40, 5.0)
        event = np.array([1] * 10 + [0] * 10 + [1] * 5 + [0] * 15, dtype=bool)
        z = np.array([0] * 20 + [1] * 20)
        data = TrialDataset("E", time=time, event=event, surrogate=np.zeros(40, int), treatment=z)
        fit = fit_exponential_ph(data)
        assert fit.beta_hat == pytest.approx(math.log(0.5), abs=1e-12)
        assert fit.lambda0_hat == pytest.approx(0.1)
        assert fit.se_beta == pytest.approx(math.sqrt(1 / 10 + 1 / 5))

    def test_arm_without_events(self):
        time = np.full(4, 1.0)
        data = TrialDataset("E", time=time, event=[1, 1, 0, 0], surrogate=[0, 0, 0, 0], treatment=[0, 0, 1, 1])
        with pytest.raises(EstimationError):
            fit_exponential_ph(data)


class TestFitMarginals:
    """All three marginal fits on synthesized trials."""

    def test_recovers_trial_effects(self):
        pop = PopulationParams(r2_true=0.65, theta_true=3.0, t_assess=0.0)
        trial = synthesize_study(pop, [20000], master_seed=17)[0]
        truth = trial.metadata['true_effects']
        fits = fit_marginals(trial)
        assert fits.n == 20000
        assert fits.logistic.alpha_hat == pytest.approx(truth.alpha_i, abs=5 * fits.logistic.se_alpha)
        assert fits.cox.beta_hat == pytest.approx(truth.beta_i, abs=5 * fits.cox.se_beta)
        assert fits.exponential.beta_hat == pytest.approx(truth.beta_i, abs=5 * fits.exponential.se_beta)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
