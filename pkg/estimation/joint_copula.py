"""
Joint Plackett-copula likelihood for a binary surrogate and a censored
exponential event time, and the profile maximum-likelihood fit of one
global odds ratio shared by all trials.

Per trial the parameters are x = (gamma, alpha, log lambda0, beta).
With u = expit(gamma + alpha z), cumulative hazard L = lambda0 e^{beta z} t,
survival g = exp(-L) and density f = lambda0 e^{beta z} g, a patient
contributes

    s=0, event     f * h(u, g)
    s=1, event     f * (1 - h(u, g))
    s=0, censored  C(u, g)
    s=1, censored  g - C(u, g)

where h = dC/dg. The copula couples response with the survival
probability, so theta > 1 means responders live longer.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit
from scipy.stats import norm

from copulas import plackett as pk
from core.config import EstimatorConfig
from core.exceptions import ConvergenceError, DomainError, EstimationError
from estimation.marginal import MarginalFits, fit_marginals
from synthesis.trial_synthesizer import TrialDataset, TrialEffects

logger = logging.getLogger(__name__)

LIKELIHOOD_FLOOR = 1e-300
PROFILE_STEP = 0.01
Z95 = float(norm.ppf(0.975))

ParamLike = Union[TrialEffects, Sequence[float], np.ndarray]


class _TrialArrays:
    """Column views and outcome masks of one trial, built once per fit."""

    def __init__(self, data: TrialDataset):
        self.trial_id = data.trial_id
        self.n = data.n
        self.z = data.treatment.astype(float)
        self.t = data.time
        self.event = data.event
        resp = data.surrogate == 0
        self.e0 = self.event & resp
        self.e1 = self.event & ~resp
        self.c0 = ~self.event & resp
        self.c1 = ~self.event & ~resp


def _as_params(params: ParamLike) -> np.ndarray:
    x = params.as_vector() if isinstance(params, TrialEffects) else np.asarray(params, dtype=float)
    if x.shape != (4,) or not np.all(np.isfinite(x)):
        raise DomainError(f"parameters must be four finite numbers, got {x}")
    return x


def _margins(x: np.ndarray, arr: _TrialArrays):
    gamma, alpha, eta, beta = x
    u = expit(gamma + alpha * arr.z)
    lin = eta + beta * arr.z
    cumhaz = np.exp(lin) * arr.t
    g = np.exp(-cumhaz)
    log_f = lin - cumhaz
    return u, g, cumhaz, log_f


def _contributions(u, g, theta, arr: _TrialArrays) -> np.ndarray:
    """Per-patient copula factor K (the density factor f is handled separately)."""
    k = np.empty(arr.n)
    inv = 1.0 / theta
    # dC/dg at (u, g) equals P(U1 <= u | U2 = g); its complement uses the reflected copula
    k[arr.e0] = pk._conditional_cdf(g[arr.e0], u[arr.e0], theta)
    k[arr.e1] = pk._conditional_cdf(g[arr.e1], 1.0 - u[arr.e1], inv)
    k[arr.c0] = pk._cdf(u[arr.c0], g[arr.c0], theta)
    k[arr.c1] = pk._cdf(1.0 - u[arr.c1], g[arr.c1], inv)
    return k


def _evaluate(x: np.ndarray, theta: float, arr: _TrialArrays, want_grad: bool = True):
    u, g, cumhaz, log_f = _margins(x, arr)
    k = _contributions(u, g, theta, arr)
    clamped = ~(k > LIKELIHOOD_FLOOR)
    k_safe = np.where(clamped, LIKELIHOOD_FLOOR, k)
    loglik = float(np.sum(np.log(k_safe)) + np.sum(log_f[arr.event]))
    n_clamped = int(clamped.sum())
    if not want_grad:
        return loglik, None, n_clamped

    h = pk._conditional_cdf(g, u, theta)
    c_u = pk._conditional_cdf(u, g, theta)
    dens = pk._density(u, g, theta)
    h_g = pk._conditional_cdf_dv(u, g, theta)

    k_u = np.zeros(arr.n)
    k_g = np.zeros(arr.n)
    m = arr.e0
    k_u[m], k_g[m] = dens[m] / k_safe[m], h_g[m] / k_safe[m]
    m = arr.e1
    k_u[m], k_g[m] = -dens[m] / k_safe[m], -h_g[m] / k_safe[m]
    m = arr.c0
    k_u[m], k_g[m] = c_u[m] / k_safe[m], h[m] / k_safe[m]
    m = arr.c1
    k_u[m], k_g[m] = -c_u[m] / k_safe[m], (1.0 - h[m]) / k_safe[m]
    k_u[clamped] = 0.0
    k_g[clamped] = 0.0

    du = u * (1.0 - u)
    d_eta = arr.event * (1.0 - cumhaz) - k_g * cumhaz * g
    grad = np.array([
        np.sum(k_u * du),
        np.sum(arr.z * k_u * du),
        np.sum(d_eta),
        np.sum(arr.z * d_eta),
    ])
    return loglik, grad, n_clamped


def loglik_trial(params: ParamLike, theta, data: TrialDataset) -> float:
    """
    Log-likelihood of one trial under the joint copula model.

    Contributions below 1e-300 are clamped; the count is logged.

    Raises:
        DomainError: non-finite parameters or theta <= 0
    """
    th = pk._theta_value(theta)
    loglik, _, n_clamped = _evaluate(_as_params(params), th, _TrialArrays(data), want_grad=False)
    if n_clamped:
        logger.warning(f"Trial {data.trial_id}: {n_clamped} likelihood contributions clamped at {LIKELIHOOD_FLOOR}")
    return loglik


def loglik_trial_gradient(params: ParamLike, theta, data: TrialDataset) -> np.ndarray:
    """Analytic score with respect to (gamma, alpha, log lambda0, beta)."""
    th = pk._theta_value(theta)
    return _evaluate(_as_params(params), th, _TrialArrays(data))[1]


def loglik_theta_score(params: ParamLike, theta, data: TrialDataset) -> float:
    """Analytic d loglik / d theta at fixed trial parameters."""
    th = pk._theta_value(theta)
    arr = _TrialArrays(data)
    u, g, _, _ = _margins(_as_params(params), arr)
    k = _contributions(u, g, th, arr)
    ok = k > LIKELIHOOD_FLOOR
    h_t = pk._conditional_cdf_v_dtheta(u, g, th)
    c_t = pk._cdf_dtheta(u, g, th)
    dk = np.zeros(arr.n)
    dk[arr.e0] = h_t[arr.e0]
    dk[arr.e1] = -h_t[arr.e1]
    dk[arr.c0] = c_t[arr.c0]
    dk[arr.c1] = -c_t[arr.c1]
    return float(np.sum(dk[ok] / k[ok]))


@dataclass
class _InnerFit:
    x: np.ndarray
    loglik: float
    hessian: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    n_clamped: int


def _numeric_hessian(x: np.ndarray, theta: float, arr: _TrialArrays) -> np.ndarray:
    hess = np.empty((4, 4))
    for j in range(4):
        step = 1e-5 * (1.0 + abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        hess[:, j] = (_evaluate(xp, theta, arr)[1] - _evaluate(xm, theta, arr)[1]) / (2.0 * step)
    return 0.5 * (hess + hess.T)


def _maximize_trial(x0: np.ndarray, theta: float, arr: _TrialArrays, tol: float, max_iter: int) -> _InnerFit:
    """Damped Newton ascent with step-halving for one trial at fixed theta."""
    x = x0.copy()
    loglik, grad, n_clamped = _evaluate(x, theta, arr)
    hess = _numeric_hessian(x, theta, arr)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            break
        neg = -hess
        w = np.linalg.eigvalsh(neg)
        if w[0] <= 1e-10 * max(1.0, w[-1]):
            neg = neg + (abs(w[0]) + 1e-6 * max(1.0, w[-1])) * np.eye(4)
        step = np.linalg.solve(neg, grad)
        accepted = False
        for _ in range(30):
            cand = x + step
            new_ll, new_grad, new_clamped = _evaluate(cand, theta, arr)
            if np.isfinite(new_ll) and new_ll >= loglik - 1e-10 * max(1.0, abs(loglik)):
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break
        x, loglik, grad, n_clamped = cand, new_ll, new_grad, new_clamped
        hess = _numeric_hessian(x, theta, arr)
    grad_norm = float(np.max(np.abs(grad)))
    return _InnerFit(x, loglik, hess, grad_norm < tol, iteration, grad_norm, n_clamped)


@dataclass
class JointFitResult:
    theta_hat: float
    theta_ci: Tuple[float, float]
    per_trial: List[TrialEffects]
    loglik: float
    iterations: int
    converged: bool
    profile_curvature: float = float("nan")
    profile: List[Tuple[float, float]] = field(default_factory=list)
    flags: Dict[str, Any] = field(default_factory=dict)


class _Profile:
    """Profile log-likelihood in log theta; every inner fit starts from the marginal estimates."""

    def __init__(self, trials: Sequence[TrialDataset], starts: List[np.ndarray], config: EstimatorConfig):
        self.arrays = [_TrialArrays(t) for t in trials]
        self.starts = starts
        self.config = config
        self.evaluations = 0
        self._cache: Dict[float, Tuple[float, List[_InnerFit]]] = {}

    def fits(self, log_theta: float) -> Tuple[float, List[_InnerFit]]:
        key = float(log_theta)
        if key in self._cache:
            return self._cache[key]
        theta = math.exp(key)
        fits = [
            _maximize_trial(x0, theta, arr, self.config.inner_tol, self.config.inner_max_iter)
            for x0, arr in zip(self.starts, self.arrays)
        ]
        failures = sum(not f.converged for f in fits)
        if failures > self.config.max_inner_failure_fraction * len(fits):
            raise EstimationError(
                f"inner maximization failed in {failures}/{len(fits)} trials at theta={theta:.4g}"
            )
        total = float(sum(f.loglik for f in fits))
        self.evaluations += 1
        logger.debug(f"Profile log theta={key:.6f}: loglik={total:.6f}, inner failures={failures}")
        self._cache[key] = (total, fits)
        return total, fits

    def __call__(self, log_theta: float) -> float:
        return self.fits(log_theta)[0]


def _count_local_maxima(values: np.ndarray) -> int:
    padded = np.concatenate(([-np.inf], values, [-np.inf]))
    return int(np.sum((padded[1:-1] > padded[:-2]) & (padded[1:-1] >= padded[2:])))


def _marginal_start(m: MarginalFits) -> np.ndarray:
    return np.array([m.logistic.gamma_hat, m.logistic.alpha_hat,
                     m.exponential.log_lambda0_hat, m.exponential.beta_hat])


def fit_joint(
    trials: Sequence[TrialDataset],
    config: Optional[EstimatorConfig] = None,
    marginals: Optional[Sequence[MarginalFits]] = None,
) -> JointFitResult:
    """
    Profile maximum likelihood of the shared theta.

    A coarse scan of log theta over the configured bounds locates the
    maximum and flags multimodality; bounded Brent then refines it
    between the neighbouring grid points. Per-trial standard errors come
    from the observed information of each inner fit.

    Raises:
        DomainError: fewer than 2 trials
        EstimationError: too many inner failures
        ConvergenceError: profile maximum on the search boundary, or flat profile
    """
    config = config or EstimatorConfig()
    if len(trials) < 2:
        raise DomainError(f"joint fit needs at least 2 trials, got {len(trials)}")
    if marginals is None:
        marginals = [fit_marginals(t, config.ties) for t in trials]
    profile = _Profile(trials, [_marginal_start(m) for m in marginals], config)

    lo, hi = (math.log(b) for b in config.theta_bounds)
    grid = np.linspace(lo, hi, config.profile_grid_points)
    values = np.array([profile(x) for x in grid])
    k = int(np.argmax(values))
    multimodal = _count_local_maxima(values) > 1
    if multimodal:
        logger.warning("Profile likelihood scan is not unimodal in log theta")

    left = grid[max(k - 1, 0)]
    right = grid[min(k + 1, grid.size - 1)]
    res = minimize_scalar(lambda x: -profile(x), bounds=(left, right), method="bounded",
                          options={"xatol": config.outer_xatol})
    log_theta = float(res.x)
    if log_theta - lo < 10 * config.outer_xatol or hi - log_theta < 10 * config.outer_xatol:
        raise ConvergenceError(
            f"profile maximum at the search boundary (theta={math.exp(log_theta):.4g})",
            residual=float(-res.fun),
        )

    best, fits = profile.fits(log_theta)
    up, down = profile(log_theta + PROFILE_STEP), profile(log_theta - PROFILE_STEP)
    curvature = -(up - 2.0 * best + down) / PROFILE_STEP ** 2

    per_trial = []
    inner_failures = 0
    for data, fit in zip(trials, fits):
        inner_failures += int(not fit.converged)
        try:
            cov = np.linalg.inv(-fit.hessian)
            se_alpha, se_beta = math.sqrt(cov[1, 1]), math.sqrt(cov[3, 3])
        except (np.linalg.LinAlgError, ValueError):
            se_alpha = se_beta = float("nan")
        gamma, alpha, eta, beta = fit.x
        per_trial.append(TrialEffects(gamma_i=gamma, log_lambda0_i=eta, alpha_i=alpha, beta_i=beta,
                                      se_alpha=se_alpha, se_beta=se_beta, trial_id=data.trial_id))

    result = JointFitResult(
        theta_hat=math.exp(log_theta),
        theta_ci=(float("nan"), float("nan")),
        per_trial=per_trial,
        loglik=best,
        iterations=profile.evaluations,
        converged=bool(res.success) and inner_failures == 0,
        profile_curvature=curvature,
        profile=[(float(x), float(v)) for x, v in zip(grid, values)],
        flags={
            'profile_multimodal': multimodal,
            'inner_failures': inner_failures,
            'likelihood_clamps': sum(f.n_clamped for f in fits),
        },
    )
    if result.flags['likelihood_clamps']:
        logger.warning(f"{result.flags['likelihood_clamps']} likelihood contributions clamped at the optimum")
    result.theta_ci = theta_confidence_interval(result)
    logger.info(f"Joint fit: theta={result.theta_hat:.4f} CI=({result.theta_ci[0]:.4f}, {result.theta_ci[1]:.4f}), "
                f"{profile.evaluations} profile evaluations")
    return result


def theta_confidence_interval(result: JointFitResult, config: Optional[EstimatorConfig] = None) -> Tuple[float, float]:
    """Wald interval exp(log theta_hat +- 1.96 / sqrt(curvature)) from the profile curvature."""
    c = result.profile_curvature
    if not c > 0:
        raise ConvergenceError("profile likelihood is flat or convex at the optimum", residual=c)
    half = Z95 / math.sqrt(c)
    log_theta = math.log(result.theta_hat)
    return (math.exp(log_theta - half), math.exp(log_theta + half))
