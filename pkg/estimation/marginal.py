"""
First-stage marginal models fitted trial by trial.

Logistic regression of the surrogate on treatment (closed form for the
saturated 2x2 model), Cox proportional hazards for the event time with
Efron or Breslow ties, and exponential rates used to start the joint
copula fit.
"""

import math
from dataclasses import dataclass, field
from typing import Literal, Tuple
import logging

import numpy as np
from scipy.stats import norm

from core.exceptions import ConvergenceError, EstimationError, MonotoneLikelihoodError
from synthesis.trial_synthesizer import TrialDataset

logger = logging.getLogger(__name__)

Z95 = float(norm.ppf(0.975))
HALDANE = 0.5
BETA_BOUND = 20.0
MAX_HALVINGS = 40

Ties = Literal["efron", "breslow"]


def _wald(est: float, se: float) -> Tuple[float, float]:
    return (math.exp(est - Z95 * se), math.exp(est + Z95 * se))


@dataclass(frozen=True)
class LogisticFit:
    """Logistic model logit P(S=0 | z) = gamma + alpha z."""

    gamma_hat: float
    alpha_hat: float
    se_gamma: float
    se_alpha: float
    counts: Tuple[int, int, int, int]  # control resp, control non-resp, treated resp, treated non-resp
    zero_cell_corrected: bool = False

    @property
    def odds_ratio(self) -> float:
        return math.exp(self.alpha_hat)

    @property
    def or_ci(self) -> Tuple[float, float]:
        return _wald(self.alpha_hat, self.se_alpha)


@dataclass(frozen=True)
class CoxFit:
    beta_hat: float
    se_beta: float
    n_events: int
    loglik: float = float("nan")
    iterations: int = 0
    covariate: str = "treatment"
    ties: str = "efron"

    @property
    def hazard_ratio(self) -> float:
        return math.exp(self.beta_hat)

    @property
    def hr_ci(self) -> Tuple[float, float]:
        return _wald(self.beta_hat, self.se_beta)


@dataclass(frozen=True)
class ExponentialFit:
    lambda0_hat: float
    beta_hat: float
    se_beta: float
    events: Tuple[int, int]
    exposure: Tuple[float, float]

    @property
    def log_lambda0_hat(self) -> float:
        return math.log(self.lambda0_hat)


@dataclass(frozen=True)
class MarginalFits:
    """The three per-trial marginal fits bundled together."""

    trial_id: str
    n: int
    logistic: LogisticFit
    cox: CoxFit
    exponential: ExponentialFit
    flags: Tuple[str, ...] = field(default_factory=tuple)


def _require_both_arms(data: TrialDataset):
    if not data.has_both_arms:
        raise EstimationError("both treatment arms must be present", trial_id=data.trial_id)


def fit_logistic_treatment(data: TrialDataset) -> LogisticFit:
    """
    Closed-form MLE of the saturated one-covariate logistic model.

    Any empty cell triggers the Haldane-Anscombe correction (+0.5 to
    every cell) and sets zero_cell_corrected.
    """
    _require_both_arms(data)
    control, treated = data.arm(0), data.arm(1)
    a = int(np.sum(data.surrogate[control] == 0))
    b = int(np.sum(data.surrogate[control] == 1))
    c = int(np.sum(data.surrogate[treated] == 0))
    d = int(np.sum(data.surrogate[treated] == 1))
    counts = (a, b, c, d)

    corrected = min(counts) == 0
    if corrected:
        logger.warning(f"Trial {data.trial_id}: zero cell in 2x2 table {counts}, applying +0.5 correction")
    ca, cb, cc, cd = (x + HALDANE if corrected else float(x) for x in counts)

    gamma_hat = math.log(ca / cb)
    alpha_hat = math.log((cc * cb) / (cd * ca))
    return LogisticFit(
        gamma_hat=gamma_hat,
        alpha_hat=alpha_hat,
        se_gamma=math.sqrt(1.0 / ca + 1.0 / cb),
        se_alpha=math.sqrt(1.0 / ca + 1.0 / cb + 1.0 / cc + 1.0 / cd),
        counts=counts,
        zero_cell_corrected=corrected,
    )


class _RiskSets:
    """Sorted event-time structure shared by every partial-likelihood evaluation."""

    def __init__(self, time: np.ndarray, event: np.ndarray, x: np.ndarray):
        order = np.argsort(time, kind="mergesort")
        self.t = time[order]
        self.e = event[order].astype(float)
        self.x = x[order].astype(float)
        _, self.first, self.group = np.unique(self.t, return_index=True, return_inverse=True)
        n_groups = self.first.size
        deaths = np.bincount(self.group, weights=self.e, minlength=n_groups)
        self.deaths = np.rint(deaths).astype(int)
        self.event_groups = np.flatnonzero(self.deaths > 0)
        d = self.deaths[self.event_groups]
        self.g_per_event = np.repeat(self.event_groups, d)
        offsets = np.repeat(np.cumsum(d) - d, d)
        self.rank_frac = (np.arange(d.sum()) - offsets) / np.repeat(d, d)
        self.x_event_sum = float(np.sum(self.x * self.e))
        self.n_events = int(d.sum())

    def evaluate(self, beta: float, ties: str) -> Tuple[float, float, float]:
        phi = np.exp(beta * self.x)
        px, pxx = phi * self.x, phi * self.x * self.x
        n_groups = self.first.size

        def risk(v):
            return np.cumsum(v[::-1])[::-1][self.first]

        def tied(v):
            return np.bincount(self.group, weights=v * self.e, minlength=n_groups)

        g = self.g_per_event
        frac = self.rank_frac if ties == "efron" else np.zeros_like(self.rank_frac)
        den = risk(phi)[g] - frac * tied(phi)[g]
        num1 = risk(px)[g] - frac * tied(px)[g]
        num2 = risk(pxx)[g] - frac * tied(pxx)[g]

        m1 = num1 / den
        loglik = beta * self.x_event_sum - float(np.sum(np.log(den)))
        score = self.x_event_sum - float(np.sum(m1))
        info = float(np.sum(num2 / den - m1 * m1))
        return loglik, score, info


def partial_likelihood(beta: float, time, event, x, ties: Ties = "efron") -> Tuple[float, float, float]:
    """Cox log partial likelihood, score and observed information at beta."""
    rs = _RiskSets(np.asarray(time, float), np.asarray(event, bool), np.asarray(x, float))
    return rs.evaluate(beta, ties)


def fit_cox_covariate(
    data: TrialDataset,
    covariate: Literal["treatment", "surrogate"] = "treatment",
    ties: Ties = "efron",
    max_iter: int = 50,
    score_tol: float = 1e-10,
    step_tol: float = 1e-12,
) -> CoxFit:
    """
    Single-covariate Cox model by Newton-Raphson with step-halving.

    Raises:
        EstimationError: no events, or the covariate is constant
        MonotoneLikelihoodError: an accepted step leaves the trust bound |beta| <= 20
        ConvergenceError: step-halving exhausted, or no convergence within max_iter
    """
    x = data.treatment if covariate == "treatment" else data.surrogate
    if ties not in ("efron", "breslow"):
        raise EstimationError(f"unknown tie method {ties!r}", trial_id=data.trial_id)
    if np.all(x == x[0]):
        raise EstimationError(f"covariate '{covariate}' is constant", trial_id=data.trial_id)
    if not data.event.any():
        raise EstimationError("no events", trial_id=data.trial_id)

    rs = _RiskSets(data.time, data.event, x)
    beta = 0.0
    loglik, score, info = rs.evaluate(beta, ties)
    for iteration in range(1, max_iter + 1):
        if abs(score) < score_tol:
            break
        if not info > 0:
            raise ConvergenceError("non-positive information", residual=abs(score), trial_id=data.trial_id)
        step = score / info
        for _ in range(MAX_HALVINGS):
            candidate = beta + step
            with np.errstate(over="ignore", invalid="ignore"):
                new = rs.evaluate(candidate, ties)
            if np.isfinite(new[0]) and new[0] >= loglik - 1e-12:
                break
            step /= 2.0
        else:
            raise ConvergenceError(
                f"step-halving found no ascent step after {MAX_HALVINGS} halvings",
                residual=abs(score), trial_id=data.trial_id,
            )
        if abs(candidate) > BETA_BOUND:
            raise MonotoneLikelihoodError(
                f"Cox estimate for '{covariate}' diverges (|beta| > {BETA_BOUND}, "
                f"{rs.n_events} events); likelihood is monotone",
                trial_id=data.trial_id,
            )
        beta = candidate
        loglik, score, info = new
        logger.debug(f"Cox trial {data.trial_id} iter {iteration}: beta={beta:.10f}, score={score:.3e}")
        if abs(step) < step_tol:
            break
    else:
        raise ConvergenceError("Cox Newton-Raphson did not converge", residual=abs(score), trial_id=data.trial_id)

    if not info > 0:
        raise ConvergenceError("non-positive information at optimum", residual=abs(score), trial_id=data.trial_id)
    return CoxFit(
        beta_hat=beta,
        se_beta=1.0 / math.sqrt(info),
        n_events=rs.n_events,
        loglik=loglik,
        iterations=iteration,
        covariate=covariate,
        ties=ties,
    )


def fit_cox_treatment(data: TrialDataset, ties: Ties = "efron") -> CoxFit:
    _require_both_arms(data)
    return fit_cox_covariate(data, "treatment", ties)


def fit_exponential_ph(data: TrialDataset) -> ExponentialFit:
    """Per-arm rate MLE events / exposure; beta is the log rate ratio."""
    _require_both_arms(data)
    events, exposure = [], []
    for z in (0, 1):
        mask = data.arm(z)
        d = int(data.event[mask].sum())
        if d == 0:
            raise EstimationError(f"no events in arm {z}", trial_id=data.trial_id)
        events.append(d)
        exposure.append(float(data.time[mask].sum()))
    rate0 = events[0] / exposure[0]
    rate1 = events[1] / exposure[1]
    return ExponentialFit(
        lambda0_hat=rate0,
        beta_hat=math.log(rate1 / rate0),
        se_beta=math.sqrt(1.0 / events[0] + 1.0 / events[1]),
        events=(events[0], events[1]),
        exposure=(exposure[0], exposure[1]),
    )


def fit_marginals(data: TrialDataset, ties: Ties = "efron") -> MarginalFits:
    logistic = fit_logistic_treatment(data)
    cox = fit_cox_treatment(data, ties)
    exponential = fit_exponential_ph(data)
    flags = ("zero_cell_corrected",) if logistic.zero_cell_corrected else ()
    return MarginalFits(data.trial_id, data.n, logistic, cox, exponential, flags)
