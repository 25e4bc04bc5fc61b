"""
Second stage: between-trial association of the treatment effects.

R2_copula comes from the dispersion matrix of the per-trial
(log-OR, log-HR) pairs; R2_WLS and R2_adj come from weighted
regressions of log-HR on log-OR.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Literal, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
import statsmodels.api as sm
from scipy.stats import norm

from core.config import EstimatorConfig
from core.exceptions import DegenerateDispersionError, DomainError, EstimationError
from estimation.results import Estimate
from synthesis.trial_synthesizer import TrialEffects

logger = logging.getLogger(__name__)

Z95 = float(norm.ppf(0.975))
Scheme = Literal["inverse_var_logOR", "sample_size", "inverse_sample_size"]
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class DispersionMatrix:
    """Between-trial covariance of (alpha_i, beta_i)."""

    d_aa: float
    d_ab: float
    d_bb: float

    def __post_init__(self):
        if self.d_aa < 0 or self.d_bb < 0:
            raise DomainError(f"negative variance in dispersion matrix ({self.d_aa}, {self.d_bb})")
        if self.d_ab ** 2 > self.d_aa * self.d_bb * (1.0 + 1e-12) + 1e-300:
            raise DomainError("dispersion matrix is not positive semidefinite")


class WeightedR2(NamedTuple):
    r2: float
    slope: float
    intercept: float


@dataclass
class TrialLevelResult:
    r2_copula: Estimate
    r2_wls: Estimate
    r2_adj: Estimate
    slope: float
    intercept: float
    weights_used: str
    dispersion: DispersionMatrix
    ci_method: str
    flags: List[str] = field(default_factory=list)


def _pairs(effects: Sequence[TrialEffects]) -> Tuple[np.ndarray, np.ndarray]:
    a = np.array([e.alpha_i for e in effects], dtype=float)
    b = np.array([e.beta_i for e in effects], dtype=float)
    return a, b


def fit_dispersion(effects: Sequence[TrialEffects], method: Literal["raw", "adjusted"] = "raw") -> DispersionMatrix:
    """
    Sample covariance (denominator N-1) of the estimated effect pairs.

    The adjusted variant subtracts the mean within-trial estimation
    variance from each diagonal entry, keeping the matrix positive
    semidefinite.

    Raises:
        DomainError: fewer than 3 trials, or missing standard errors for 'adjusted'
        DegenerateDispersionError: zero variance in either coordinate
    """
    if len(effects) < 3:
        raise DomainError(f"second stage needs at least 3 trials, got {len(effects)}")
    a, b = _pairs(effects)
    cov = np.cov(a, b, ddof=1)
    d_aa, d_ab, d_bb = float(cov[0, 0]), float(cov[0, 1]), float(cov[1, 1])
    scale = max(1.0, float(np.max(np.abs(np.concatenate([a, b])))) ** 2)
    if d_aa <= VARIANCE_FLOOR * scale or d_bb <= VARIANCE_FLOOR * scale:
        raise DegenerateDispersionError(f"zero between-trial variance (d_aa={d_aa:.3g}, d_bb={d_bb:.3g})")

    if method == "adjusted":
        se_a = np.array([e.se_alpha for e in effects], dtype=float)
        se_b = np.array([e.se_beta for e in effects], dtype=float)
        if np.any(~np.isfinite(se_a)) or np.any(~np.isfinite(se_b)):
            raise DomainError("adjusted dispersion requires standard errors for every trial")
        d_aa = max(d_aa - float(np.mean(se_a ** 2)), VARIANCE_FLOOR * scale)
        d_bb = max(d_bb - float(np.mean(se_b ** 2)), VARIANCE_FLOOR * scale)
        limit = math.sqrt(d_aa * d_bb)
        d_ab = float(np.clip(d_ab, -limit, limit))
    elif method != "raw":
        raise DomainError(f"unknown dispersion method {method!r}")
    else:
        # rounding can push |d_ab| a hair above sqrt(d_aa d_bb)
        limit = math.sqrt(d_aa * d_bb)
        d_ab = float(np.clip(d_ab, -limit, limit))
    return DispersionMatrix(d_aa, d_ab, d_bb)


def r2_copula(dispersion: DispersionMatrix) -> float:
    """d_ab^2 / (d_aa d_bb)."""
    if dispersion.d_aa <= 0 or dispersion.d_bb <= 0:
        raise DomainError("R2_copula undefined with zero variance")
    return min(1.0, dispersion.d_ab ** 2 / (dispersion.d_aa * dispersion.d_bb))


def scheme_weights(effects: Sequence[TrialEffects], trial_ns: Sequence[int], scheme: Scheme) -> np.ndarray:
    if scheme == "inverse_var_logOR":
        se = np.array([np.nan if e.se_alpha is None else e.se_alpha for e in effects], dtype=float)
        w = 1.0 / se ** 2
    elif scheme == "sample_size":
        w = np.asarray(trial_ns, dtype=float)
    elif scheme == "inverse_sample_size":
        w = 1.0 / np.asarray(trial_ns, dtype=float)
    else:
        raise DomainError(f"unknown weight scheme {scheme!r}")
    if w.shape != (len(effects),) or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise DomainError(f"weights for scheme '{scheme}' must be positive and finite")
    return w


def r2_weighted(effects: Sequence[TrialEffects], trial_ns: Sequence[int], scheme: Scheme) -> WeightedR2:
    """
    WLS of beta_i on alpha_i with the scheme's weights.

    R2 = 1 - sum w r^2 / sum w (beta - weighted mean)^2, which is the
    rsquared statsmodels reports for a weighted model with a constant.

    Raises:
        DomainError: fewer than 3 trials, bad weights, or a constant predictor/response
    """
    if len(effects) < 3:
        raise DomainError(f"second stage needs at least 3 trials, got {len(effects)}")
    a, b = _pairs(effects)
    w = scheme_weights(effects, trial_ns, scheme)
    if np.ptp(a) == 0:
        raise DomainError("log-OR is constant across trials")
    if np.ptp(b) == 0:
        raise DomainError("log-HR is constant across trials")
    res = sm.WLS(b, sm.add_constant(a, has_constant="add"), weights=w).fit()
    intercept, slope = (float(v) for v in res.params)
    r2 = float(np.clip(res.rsquared, 0.0, 1.0))
    return WeightedR2(r2, slope, intercept)


def _fisher_interval(r2: float, n_trials: int, sign: float) -> Tuple[float, float]:
    r = math.copysign(math.sqrt(r2), sign)
    half = Z95 / math.sqrt(n_trials - 3)
    centre = math.atanh(r)
    lo_r, hi_r = math.tanh(centre - half), math.tanh(centre + half)
    if lo_r >= 0:
        return lo_r ** 2, hi_r ** 2
    if hi_r <= 0:
        return hi_r ** 2, lo_r ** 2
    return 0.0, max(lo_r ** 2, hi_r ** 2)


def _jackknife_lower(r2: float, n_trials: int, source: Callable[[np.ndarray], float]) -> float:
    loo = []
    for i in range(n_trials):
        idx = np.delete(np.arange(n_trials), i)
        try:
            loo.append(source(idx))
        except (DomainError, DegenerateDispersionError):
            continue
    if len(loo) < 2:
        raise EstimationError("jackknife failed: too few leave-one-out fits")
    loo = np.asarray(loo)
    se = math.sqrt((len(loo) - 1) / len(loo) * float(np.sum((loo - loo.mean()) ** 2)))
    return max(0.0, r2 - Z95 * se)


def _interval(
    r2: float,
    n_trials: int,
    method: str,
    source: Optional[Callable[[np.ndarray], float]],
    sign: float,
    rng: Optional[np.random.Generator],
    resamples: int,
) -> Tuple[float, float, Optional[str]]:
    if method == "fisher_z":
        if n_trials < 4:
            raise DomainError(f"fisher_z needs at least 4 trials, got {n_trials}")
        if math.sqrt(max(r2, 0.0)) >= 1.0:
            if source is None:
                raise DomainError("R2 = 1 needs a resample source for the jackknife fallback")
            return _jackknife_lower(r2, n_trials, source), 1.0, "fisher_singular"
        lo, hi = _fisher_interval(r2, n_trials, sign)
        return lo, hi, None
    if method == "trial_bootstrap":
        if n_trials < 5:
            raise DomainError(f"trial_bootstrap needs at least 5 trials, got {n_trials}")
        if source is None or rng is None:
            raise DomainError("trial_bootstrap needs a resample source and a random stream")
        stats = []
        for _ in range(resamples):
            idx = rng.integers(0, n_trials, n_trials)
            try:
                stats.append(source(idx))
            except (DomainError, DegenerateDispersionError):
                continue
        if len(stats) < resamples // 2:
            raise EstimationError(f"bootstrap failed: only {len(stats)}/{resamples} usable resamples")
        lo, hi = np.quantile(np.asarray(stats), [0.025, 0.975])
        flag = "bootstrap_resamples_skipped" if len(stats) < resamples else None
        return float(lo), float(hi), flag
    raise DomainError(f"unknown interval method {method!r}")


def r2_confidence_interval(
    r2: float,
    n_trials: int,
    method: Literal["fisher_z", "trial_bootstrap"] = "fisher_z",
    resample_source: Optional[Callable[[np.ndarray], float]] = None,
    sign: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    resamples: int = 2000,
) -> Tuple[float, float]:
    """
    95% interval for an R2 value, clipped to [0, 1].

    Args:
        r2: Point estimate
        n_trials: Number of trials N
        method: fisher_z (on r = sign * sqrt(R2)) or trial_bootstrap (percentile)
        resample_source: Callable mapping an index array of trials to a recomputed R2
        sign: Sign of the underlying correlation/slope
        rng: Stream for bootstrap resampling
        resamples: Bootstrap resample count
    """
    lo, hi, _ = _interval(r2, n_trials, method, resample_source, sign, rng, resamples)
    return float(np.clip(lo, 0.0, 1.0)), float(np.clip(hi, 0.0, 1.0))


def _finalize(est: float, lo: float, hi: float, flags: List[str], name: str) -> Estimate:
    clipped = [float(np.clip(v, 0.0, 1.0)) for v in (est, lo, hi)]
    if clipped != [est, lo, hi]:
        flags.append(f"{name}_clipped")
    est, lo, hi = clipped
    if not lo <= est <= hi:
        flags.append(f"{name}_interval_widened")
        lo, hi = min(lo, est), max(hi, est)
    return Estimate(est, lo, hi)


def estimate_trial_level(
    effects: Sequence[TrialEffects],
    trial_ns: Sequence[int],
    config: Optional[EstimatorConfig] = None,
    ci_method: str = "fisher_z",
    rng: Optional[np.random.Generator] = None,
) -> TrialLevelResult:
    """Dispersion, the three R2 estimators, the WLS line and their intervals."""
    config = config or EstimatorConfig()
    effects = list(effects)
    trial_ns = np.asarray(trial_ns, dtype=int)
    n_trials = len(effects)
    flags: List[str] = []

    dispersion = fit_dispersion(effects, config.dispersion)
    r2_cop = r2_copula(dispersion)
    wls = r2_weighted(effects, trial_ns, config.wls_weights)
    adj = r2_weighted(effects, trial_ns, "inverse_var_logOR")

    def subset(idx):
        return [effects[i] for i in idx], trial_ns[idx]

    def copula_source(idx):
        sub, _ = subset(idx)
        return r2_copula(fit_dispersion(sub, config.dispersion))

    def weighted_source(scheme):
        def source(idx):
            sub, ns = subset(idx)
            return r2_weighted(sub, ns, scheme).r2
        return source

    estimates = {}
    for name, value, sign, source in (
        ("r2_copula", r2_cop, dispersion.d_ab, copula_source),
        ("r2_wls", wls.r2, wls.slope, weighted_source(config.wls_weights)),
        ("r2_adj", adj.r2, adj.slope, weighted_source("inverse_var_logOR")),
    ):
        lo, hi, flag = _interval(value, n_trials, ci_method, source, sign, rng, config.bootstrap_resamples)
        if flag:
            flags.append(f"{name}_{flag}")
        estimates[name] = _finalize(value, lo, hi, flags, name)

    if flags:
        logger.debug(f"Second-stage flags: {flags}")
    return TrialLevelResult(
        r2_copula=estimates["r2_copula"],
        r2_wls=estimates["r2_wls"],
        r2_adj=estimates["r2_adj"],
        slope=wls.slope,
        intercept=wls.intercept,
        weights_used=config.wls_weights,
        dispersion=dispersion,
        ci_method=ci_method,
        flags=flags,
    )
