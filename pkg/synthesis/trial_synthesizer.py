"""
Multi-trial data generator.

Trial-level effects come from a structured multivariate normal; patients
get a Plackett-coupled pair (U1, U2) mapped to a binary surrogate and an
exponential event time, then independent exponential censoring and the
landmark override are applied.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence
import logging

import numpy as np
from scipy.special import expit

from copulas.plackett import sample_pair
from core.exceptions import DataValidationError, DomainError
from utils.rng_utils import make_stream

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10


@dataclass(frozen=True)
class PopulationParams:
    """Population-level generator settings. Time unit is one year."""

    gamma: float = math.log(0.4 / 0.6)
    log_lambda0: float = math.log(0.15)
    alpha: float = 0.8
    beta: float = -0.74
    r2_true: float = 0.65
    theta_true: float = 3.0
    censor_rate: float = 0.05
    t_assess: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.r2_true <= 1.0:
            raise DomainError(f"r2_true must lie in [0, 1], got {self.r2_true}")
        if not self.theta_true > 0.0:
            raise DomainError(f"theta_true must be > 0, got {self.theta_true}")
        if not 0.0 <= self.censor_rate < 1.0:
            raise DomainError(f"censor_rate must lie in [0, 1), got {self.censor_rate}")
        if not self.t_assess >= 0.0:
            raise DomainError(f"t_assess must be >= 0, got {self.t_assess}")

    @property
    def censor_hazard(self) -> float:
        return -math.log1p(-self.censor_rate)

    @property
    def mean_vector(self) -> np.ndarray:
        return np.array([self.gamma, self.log_lambda0, self.alpha, self.beta])

    def covariance(self) -> np.ndarray:
        """Unit variances, -sqrt(R2) within the (gamma, log lambda0) and (alpha, beta) blocks."""
        rho = -math.sqrt(self.r2_true)
        block = np.array([[1.0, rho], [rho, 1.0]])
        cov = np.zeros((4, 4))
        cov[:2, :2] = block
        cov[2:, 2:] = block
        return cov


@dataclass
class TrialEffects:
    """Per-trial parameters, either drawn (truth) or estimated."""

    gamma_i: float
    log_lambda0_i: float
    alpha_i: float
    beta_i: float
    se_alpha: Optional[float] = None
    se_beta: Optional[float] = None
    trial_id: Optional[str] = None

    def __post_init__(self):
        values = (self.gamma_i, self.log_lambda0_i, self.alpha_i, self.beta_i)
        if not all(np.isfinite(v) for v in values):
            raise DomainError(f"trial effects must be finite, got {values}")

    def as_vector(self) -> np.ndarray:
        """(gamma, alpha, log lambda0, beta) as used by the joint likelihood."""
        return np.array([self.gamma_i, self.alpha_i, self.log_lambda0_i, self.beta_i])


@dataclass(frozen=True)
class PatientRecord:
    time: float
    event: bool
    surrogate: int  # 0 = responder, 1 = non-responder
    treatment: int


@dataclass
class TrialDataset:
    """One trial stored column-wise."""

    trial_id: str
    time: np.ndarray
    event: np.ndarray
    surrogate: np.ndarray
    treatment: np.ndarray
    patient_id: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=bool)
        self.surrogate = np.asarray(self.surrogate, dtype=np.int8)
        self.treatment = np.asarray(self.treatment, dtype=np.int8)
        n = self.time.shape[0]
        if any(arr.shape != (n,) for arr in (self.event, self.surrogate, self.treatment)):
            raise DataValidationError("column lengths differ", trial_id=self.trial_id)
        if n < 2:
            raise DataValidationError(f"a trial needs at least 2 patients, got {n}", trial_id=self.trial_id)
        if np.any(~np.isfinite(self.time)) or np.any(self.time < 0):
            raise DataValidationError("times must be finite and >= 0", trial_id=self.trial_id)
        if np.any((self.surrogate != 0) & (self.surrogate != 1)):
            raise DataValidationError("surrogate must be 0 or 1", trial_id=self.trial_id)
        if np.any((self.treatment != 0) & (self.treatment != 1)):
            raise DataValidationError("treatment must be 0 or 1", trial_id=self.trial_id)
        if self.patient_id is None:
            self.patient_id = np.arange(1, n + 1)

    @classmethod
    def from_records(cls, trial_id: str, records: Sequence[PatientRecord]) -> "TrialDataset":
        return cls(
            trial_id=trial_id,
            time=[r.time for r in records],
            event=[r.event for r in records],
            surrogate=[r.surrogate for r in records],
            treatment=[r.treatment for r in records],
        )

    @property
    def n(self) -> int:
        return int(self.time.shape[0])

    @property
    def patients(self) -> Iterator[PatientRecord]:
        for t, d, s, z in zip(self.time, self.event, self.surrogate, self.treatment):
            yield PatientRecord(float(t), bool(d), int(s), int(z))

    @property
    def has_both_arms(self) -> bool:
        return 0 < int(self.treatment.sum()) < self.n

    def arm(self, z: int) -> np.ndarray:
        return self.treatment == z

    def summary(self) -> Dict[str, Any]:
        """Counts echoed on ingestion and in generate manifests."""
        out: Dict[str, Any] = {
            'trial_id': self.trial_id,
            'n': self.n,
            'events': int(self.event.sum()),
            'censored_fraction': float(1.0 - self.event.mean()),
        }
        for z, label in ((0, 'control'), (1, 'treated')):
            mask = self.arm(z)
            out[f'n_{label}'] = int(mask.sum())
            out[f'response_rate_{label}'] = float((self.surrogate[mask] == 0).mean()) if mask.any() else float('nan')
        return out


def mvn_sample(mean: Sequence[float], covariance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    One multivariate normal draw via the symmetric eigendecomposition.

    Works for singular covariance; eigenvalues within tolerance of zero
    contribute nothing, so a zero matrix returns the mean exactly.

    Raises:
        DomainError: covariance not symmetric or smallest eigenvalue < -1e-10
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(covariance, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise DomainError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise DomainError("covariance must be symmetric")
    w, v = np.linalg.eigh(cov)
    if w.min(initial=0.0) < -PSD_TOLERANCE:
        raise DomainError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3e})")
    scale = max(1.0, float(w.max(initial=0.0)))
    w = np.where(w > PSD_TOLERANCE * scale, w, 0.0)
    z = rng.standard_normal(mean.size)
    return mean + v @ (np.sqrt(w) * z)


def draw_trial_effects(pop: PopulationParams, rng: np.random.Generator) -> TrialEffects:
    g, ll0, a, b = mvn_sample(pop.mean_vector, pop.covariance(), rng)
    return TrialEffects(gamma_i=g, log_lambda0_i=ll0, alpha_i=a, beta_i=b)


def _open_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.random(n)
    return np.clip(v, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)


def synthesize_trial(
    effects: TrialEffects,
    n: int,
    pop: PopulationParams,
    rng: np.random.Generator,
    trial_id: str = "T01",
    keep_latent: bool = False,
) -> TrialDataset:
    """
    Generate one trial of n patients.

    Draw order from the stream is fixed: allocation shuffle, U1 source,
    U2 source, censoring. Ties between event and censoring time count as
    events. With keep_latent the pre-landmark surrogate and the
    uncensored event times are kept in metadata.
    """
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")

    order = rng.permutation(n)
    treatment = np.zeros(n, dtype=np.int8)
    treatment[order[: (n + 1) // 2]] = 1

    v1 = _open_uniform(rng, n)
    v2 = _open_uniform(rng, n)
    u1, u2 = sample_pair(v1, v2, pop.theta_true)

    p_response = expit(effects.gamma_i + effects.alpha_i * treatment)
    surrogate_latent = (u1 >= p_response).astype(np.int8)

    rate = np.exp(effects.log_lambda0_i + effects.beta_i * treatment)
    t_event = -np.log(u2) / rate

    e_censor = rng.standard_exponential(n)
    lam_c = pop.censor_hazard
    t_censor = e_censor / lam_c if lam_c > 0 else np.full(n, np.inf)

    event = t_event <= t_censor
    time = np.where(event, t_event, t_censor)

    surrogate = surrogate_latent.copy()
    surrogate[time < pop.t_assess] = 1

    metadata: Dict[str, Any] = {'true_effects': effects}
    if keep_latent:
        metadata['surrogate_latent'] = surrogate_latent
        metadata['time_uncensored'] = t_event
    return TrialDataset(trial_id=trial_id, time=time, event=event, surrogate=surrogate,
                        treatment=treatment, metadata=metadata)


def synthesize_study(
    pop: PopulationParams,
    trial_sizes: Sequence[int],
    master_seed: int,
    scenario_key: int = 0,
    replicate: int = 0,
) -> List[TrialDataset]:
    """One dataset per entry of trial_sizes, each on its own keyed substream."""
    if len(trial_sizes) == 0:
        raise DomainError("trial_sizes must be non-empty")
    trials = []
    for i, n in enumerate(trial_sizes):
        rng = make_stream(master_seed, scenario_key, replicate, i)
        effects = draw_trial_effects(pop, rng)
        effects.trial_id = f"T{i + 1:02d}"
        trials.append(synthesize_trial(effects, int(n), pop, rng, trial_id=effects.trial_id))
    logger.debug(f"Synthesized {len(trials)} trials (replicate {replicate}, {sum(trial_sizes)} patients)")
    return trials


def simulation_check(
    pop: PopulationParams,
    n: int,
    rng: np.random.Generator,
    effects: Optional[TrialEffects] = None,
) -> Dict[str, Any]:
    """
    Verify the generator's margins on one large trial.

    Compares the pre-landmark response rate per arm with
    expit(gamma_i + alpha_i z), and the mean uncensored time per arm with
    1 / (lambda0_i exp(beta_i z)), reporting z-scores against Monte Carlo
    standard errors.
    """
    if effects is None:
        effects = draw_trial_effects(pop, rng)
    data = synthesize_trial(effects, n, pop, rng, trial_id="check", keep_latent=True)
    latent = data.metadata['surrogate_latent']
    t_event = data.metadata['time_uncensored']

    arms = {}
    for z, label in ((0, 'control'), (1, 'treated')):
        mask = data.arm(z)
        m = int(mask.sum())
        p_expected = float(expit(effects.gamma_i + effects.alpha_i * z))
        p_realized = float((latent[mask] == 0).mean())
        p_se = math.sqrt(p_expected * (1.0 - p_expected) / m) if 0 < p_expected < 1 else 0.0
        mean_expected = float(math.exp(-(effects.log_lambda0_i + effects.beta_i * z)))
        mean_realized = float(t_event[mask].mean())
        mean_se = mean_expected / math.sqrt(m)
        arms[label] = {
            'n': m,
            'response_expected': p_expected,
            'response_realized': p_realized,
            'response_z': (p_realized - p_expected) / p_se if p_se > 0 else 0.0,
            'mean_time_expected': mean_expected,
            'mean_time_realized': mean_realized,
            'mean_time_z': (mean_realized - mean_expected) / mean_se,
            'response_rate_after_landmark': float((data.surrogate[mask] == 0).mean()),
        }
    return {
        'effects': {
            'gamma_i': effects.gamma_i, 'log_lambda0_i': effects.log_lambda0_i,
            'alpha_i': effects.alpha_i, 'beta_i': effects.beta_i,
        },
        'arms': arms,
        'censored_fraction': float(1.0 - data.event.mean()),
    }
