"""
Plackett copula mathematics.

Joint and conditional CDFs, conditional-inversion sampling and the
constant cross-ratio identity that makes theta a global odds ratio.
All functions are pure and accept scalars or numpy arrays.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.optimize import bisect

from core.exceptions import ConvergenceError, DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# |theta - 1| below this uses the first-order expansion around independence
INDEPENDENCE_EPS = 1e-8
ROUND_TRIP_TOL = 1e-10


@dataclass(frozen=True)
class CopulaParam:
    """Plackett parameter theta (global odds ratio)."""

    theta: float

    def __post_init__(self):
        if not np.isfinite(self.theta) or self.theta <= 0:
            raise DomainError(f"theta must be > 0, got {self.theta}")

    @property
    def is_independence(self) -> bool:
        return abs(self.theta - 1.0) < INDEPENDENCE_EPS


def _theta_value(theta) -> float:
    if isinstance(theta, CopulaParam):
        return theta.theta
    theta = float(theta)
    if not np.isfinite(theta) or theta <= 0:
        raise DomainError(f"theta must be > 0, got {theta}")
    return theta


def _check_unit(name: str, x: ArrayLike, open_interval: bool = False) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(np.isnan(arr)):
        raise DomainError(f"{name} contains NaN")
    if open_interval:
        if np.any((arr <= 0.0) | (arr >= 1.0)):
            raise DomainError(f"{name} must lie in (0, 1)")
    elif np.any((arr < 0.0) | (arr > 1.0)):
        raise DomainError(f"{name} must lie in [0, 1]")
    return arr


def _ret(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def s_theta(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    """S_theta = sqrt(A^2 - 4 theta (theta-1) u v) with A = 1 + (theta-1)(u+v).

    For theta > 1 the radicand is evaluated as (A - q)(A + q),
    q = 2 sqrt(theta (theta-1) u v), which avoids cancellation at large theta.
    """
    delta = theta - 1.0
    a = 1.0 + delta * (u + v)
    if delta > 0:
        q = 2.0 * np.sqrt(theta * delta * u * v)
        radicand = (a - q) * (a + q)
    else:
        radicand = a * a - 4.0 * theta * delta * u * v
    return np.sqrt(np.maximum(radicand, 0.0))


def cdf(u: ArrayLike, v: ArrayLike, theta) -> ArrayLike:
    """
    Plackett copula C_theta(u, v).

    Evaluated as 2 theta u v / (A + S_theta), the rationalised form of
    (A - S_theta) / (2 (theta - 1)); both agree for theta != 1 and the
    former tends to u v as theta -> 1.

    Args:
        u: First margin in [0, 1]
        v: Second margin in [0, 1]
        theta: Copula parameter (> 0)

    Returns:
        C_theta(u, v)
    """
    th = _theta_value(theta)
    u = _check_unit("u", u)
    v = _check_unit("v", v)
    return _ret(_cdf(u, v, th))


def _cdf(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    delta = theta - 1.0
    if abs(delta) < INDEPENDENCE_EPS:
        return u * v * (1.0 + delta * (1.0 - u) * (1.0 - v))
    a = 1.0 + delta * (u + v)
    s = s_theta(u, v, theta)
    return 2.0 * theta * u * v / (a + s)


def conditional_cdf_given_u(u: ArrayLike, v: ArrayLike, theta) -> ArrayLike:
    """P(U2 <= v | U1 = u) = dC/du = 1/2 [1 - (A - 2 theta v) / S_theta]."""
    th = _theta_value(theta)
    u = _check_unit("u", u)
    v = _check_unit("v", v)
    return _ret(_conditional_cdf(u, v, th))


def _conditional_cdf(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    delta = theta - 1.0
    if abs(delta) < INDEPENDENCE_EPS:
        return v + delta * v * (1.0 - v) * (1.0 - 2.0 * u) + 0.0 * u
    a = 1.0 + delta * (u + v)
    s = s_theta(u, v, theta)
    out = 0.5 * (1.0 - (a - 2.0 * theta * v) / s)
    return np.clip(out, 0.0, 1.0)


def density(u: ArrayLike, v: ArrayLike, theta) -> ArrayLike:
    """Copula density theta [1 + (theta-1)(u + v - 2uv)] / S_theta^3."""
    th = _theta_value(theta)
    u = _check_unit("u", u)
    v = _check_unit("v", v)
    return _ret(_density(u, v, th))


def _density(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    delta = theta - 1.0
    s = s_theta(u, v, theta)
    return theta * (1.0 + delta * (u + v - 2.0 * u * v)) / s ** 3


def _conditional_cdf_dv(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    """d/dv of dC/dv, i.e. d2C/dv2 = -2 theta (theta-1) u (1-u) / S^3."""
    delta = theta - 1.0
    s = s_theta(u, v, theta)
    return -2.0 * theta * delta * u * (1.0 - u) / s ** 3


def _cdf_dtheta(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    """dC/dtheta; continuous at theta = 1 where it equals uv(1-u)(1-v)."""
    delta = theta - 1.0
    a = 1.0 + delta * (u + v)
    s = s_theta(u, v, theta)
    s_dt = (a * (u + v) - 2.0 * (2.0 * theta - 1.0) * u * v) / s
    denom = a + s
    return 2.0 * u * v * (denom - theta * ((u + v) + s_dt)) / denom ** 2


def _conditional_cdf_v_dtheta(u: np.ndarray, v: np.ndarray, theta: float) -> np.ndarray:
    """d/dtheta of dC/dv; equals u(1-u)(1-2v) at theta = 1."""
    delta = theta - 1.0
    a = 1.0 + delta * (u + v)
    s = s_theta(u, v, theta)
    s_dt = (a * (u + v) - 2.0 * (2.0 * theta - 1.0) * u * v) / s
    n = a - 2.0 * theta * u
    n_dt = v - u
    return -0.5 * (n_dt * s - n * s_dt) / s ** 2


def _closed_form_quantile(u: np.ndarray, p: np.ndarray, theta: float) -> np.ndarray:
    t = p * (1.0 - p)
    d2 = (theta - 1.0) ** 2
    b = theta + t * d2
    c = 2.0 * t * (u * theta ** 2 + 1.0 - u) + theta * (1.0 - 2.0 * t)
    d = np.sqrt(theta) * np.sqrt(theta + 4.0 * t * u * (1.0 - u) * d2)
    return (c - (1.0 - 2.0 * p) * d) / (2.0 * b)


def conditional_quantile_given_u(u: ArrayLike, p: ArrayLike, theta) -> ArrayLike:
    """
    Invert the conditional CDF: v with P(U2 <= v | U1 = u) = p.

    The closed-form quadratic root is checked against the round trip and
    any entry with residual above ROUND_TRIP_TOL is re-solved by bisection.

    Raises:
        ConvergenceError: bisection failed to reach the tolerance
    """
    th = _theta_value(theta)
    u = _check_unit("u", u, open_interval=True)
    p = _check_unit("p", p, open_interval=True)
    u, p = np.broadcast_arrays(u, p)
    return _ret(_conditional_quantile(u, p, th))


def _conditional_quantile(u: np.ndarray, p: np.ndarray, theta: float) -> np.ndarray:
    if abs(theta - 1.0) < INDEPENDENCE_EPS:
        v = np.array(p, dtype=float, copy=True)
    else:
        v = _closed_form_quantile(u, p, theta)
    v = np.clip(v, 0.0, 1.0)
    residual = np.abs(_conditional_cdf(u, v, theta) - p)
    bad = ~(residual <= ROUND_TRIP_TOL) | (v <= 0.0) | (v >= 1.0)
    if np.any(bad):
        v = np.array(v, copy=True)
        flat_v = v.reshape(-1)
        flat_u = np.broadcast_to(u, v.shape).reshape(-1)
        flat_p = np.broadcast_to(p, v.shape).reshape(-1)
        for idx in np.flatnonzero(bad.reshape(-1)):
            flat_v[idx] = _bisect_quantile(flat_u[idx], flat_p[idx], theta)
        logger.debug(f"Closed-form quantile fell back to bisection for {int(bad.sum())} entries")
    return v


def _bisect_quantile(u: float, p: float, theta: float) -> float:
    def objective(x):
        return float(_conditional_cdf(np.asarray(u), np.asarray(x), theta)) - p

    root = bisect(objective, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    residual = abs(objective(root))
    if residual > ROUND_TRIP_TOL:
        raise ConvergenceError(
            f"conditional quantile did not converge at u={u}, p={p}, theta={theta}", residual=residual
        )
    return root


def sample_pair(v1: ArrayLike, v2: ArrayLike, theta) -> Tuple[ArrayLike, ArrayLike]:
    """
    Conditional-inversion sampling from independent uniforms.

    Args:
        v1: Uniform draw(s) in (0, 1), returned unchanged as u1
        v2: Uniform draw(s) in (0, 1), mapped through the conditional quantile
        theta: Copula parameter

    Returns:
        (u1, u2) with joint distribution C_theta
    """
    u2 = conditional_quantile_given_u(v1, v2, theta)
    u1 = _ret(np.asarray(v1, dtype=float)) if np.ndim(u2) == 0 else np.broadcast_to(
        np.asarray(v1, dtype=float), np.shape(u2)).copy()
    return u1, u2


def cross_ratio(u: ArrayLike, v: ArrayLike, theta) -> ArrayLike:
    """Odds ratio of the 2x2 table obtained by cutting both margins at (u, v).

    Equals theta everywhere in the open unit square.
    """
    th = _theta_value(theta)
    try:
        u = _check_unit("u", u, open_interval=True)
        v = _check_unit("v", v, open_interval=True)
    except DomainError as e:
        raise DomainError(f"degenerate 2x2 table: {e}") from e
    c = _cdf(u, v, th)
    return _ret(c * (1.0 - u - v + c) / ((u - c) * (v - c)))
