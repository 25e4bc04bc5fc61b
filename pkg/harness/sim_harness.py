"""
Factorial simulation engine.

Scenarios are expanded from factor levels, each replicate runs
synthesize -> fit -> classify on its own keyed random stream, and
per-scenario replicate tables are reduced to bias / percent change /
NRMSE summaries, factor-marginal tables and acceptance-rate tables.
"""

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence
import logging

import numpy as np
import pandas as pd

from core.config import CriteriaConfig, EstimatorConfig, FactorConfig, RunConfig, ScenarioConfig
from core.exceptions import DomainError, SurrobenchError
from core.performance import RunMonitor
from harness.pipeline import analyze_trials
from synthesis.trial_synthesizer import PopulationParams, synthesize_study
from utils.rng_utils import BOOTSTRAP_SLOT, make_stream, scenario_id, scenario_key
from verdict.criteria import VerdictClass

logger = logging.getLogger(__name__)

FACTOR_NAMES = ("r2_true", "theta_true", "n_trials", "trial_size", "censor_rate", "effect_pair")
ESTIMANDS = ("r2_copula", "r2_wls", "r2_adj", "global_or")
REPLICATE_COLUMNS = [
    "scenario_id", "replicate", "status", "error",
    "r2_copula", "r2_copula_lo", "r2_copula_hi",
    "r2_wls", "r2_wls_lo", "r2_wls_hi",
    "r2_adj", "r2_adj_lo", "r2_adj_hi",
    "global_or", "global_or_lo", "global_or_hi",
    "verdict", "censored_fraction", "clipped", "zero_cell_trials", "flags",
]


@dataclass(frozen=True)
class ScenarioSpec:
    """One factor-grid cell plus everything needed to run it."""

    scenario: ScenarioConfig
    master_seed: int
    estimator: EstimatorConfig = EstimatorConfig()
    criteria: CriteriaConfig = CriteriaConfig()
    ci_method: str = "fisher_z"

    def factors(self) -> Dict[str, Any]:
        s = self.scenario
        return {
            'r2_true': s.r2_true,
            'theta_true': s.theta_true,
            'n_trials': s.n_trials,
            'trial_size': s.trial_size,
            'trial_sizes': s.trial_sizes,
            'censor_rate': s.censor_rate,
            'effect_pair': [s.alpha, s.beta],
            't_assess': s.t_assess,
            'gamma': s.gamma,
            'log_lambda0': s.log_lambda0,
        }

    @property
    def id(self) -> str:
        return scenario_id(self.factors())

    @property
    def replications(self) -> int:
        return self.scenario.replications

    def population(self) -> PopulationParams:
        s = self.scenario
        return PopulationParams(
            gamma=s.gamma, log_lambda0=s.log_lambda0, alpha=s.alpha, beta=s.beta,
            r2_true=s.r2_true, theta_true=s.theta_true, censor_rate=s.censor_rate, t_assess=s.t_assess,
        )


class Metrics(NamedTuple):
    bias: float
    percent_change: float
    nrmse: float


def _with_level(base: ScenarioConfig, name: str, level: Any) -> ScenarioConfig:
    if name == "effect_pair":
        alpha, beta = level
        return base.model_copy(update={'alpha': float(alpha), 'beta': float(beta)})
    if name == "n_trials" and base.trial_sizes is not None:
        return base.model_copy(update={'n_trials': int(level), 'trial_sizes': None})
    return base.model_copy(update={name: level})


def _factor_levels(factors: Any) -> Dict[str, List[Any]]:
    levels = factors.model_dump() if isinstance(factors, FactorConfig) else dict(factors)
    unknown = set(levels) - set(FACTOR_NAMES)
    if unknown:
        raise DomainError(f"unknown factors: {sorted(unknown)}")
    return {name: list(levels[name]) for name in FACTOR_NAMES if name in levels}


def _make_spec(cfg: ScenarioConfig, seed: int, estimator, criteria, ci_method) -> ScenarioSpec:
    # round-trip through validation so every cell obeys the schema
    cfg = ScenarioConfig.model_validate(cfg.model_dump())
    return ScenarioSpec(cfg, seed, estimator, criteria, ci_method)


def expand_grid(
    factors: Any,
    base: Optional[ScenarioConfig] = None,
    master_seed: int = 0,
    estimator: Optional[EstimatorConfig] = None,
    criteria: Optional[CriteriaConfig] = None,
    ci_method: str = "fisher_z",
) -> List[ScenarioSpec]:
    """Full Cartesian product of the factor levels over a base scenario."""
    base = base or ScenarioConfig()
    levels = _factor_levels(factors)
    names = list(levels)
    specs, seen = [], set()
    for combo in itertools.product(*(levels[n] for n in names)):
        cfg = base
        for name, level in zip(names, combo):
            cfg = _with_level(cfg, name, level)
        spec = _make_spec(cfg, master_seed, estimator or EstimatorConfig(), criteria or CriteriaConfig(), ci_method)
        if spec.id not in seen:
            seen.add(spec.id)
            specs.append(spec)
    return specs


def expand_one_at_a_time(
    anchor: ScenarioConfig,
    factors: Any,
    master_seed: int = 0,
    estimator: Optional[EstimatorConfig] = None,
    criteria: Optional[CriteriaConfig] = None,
    ci_method: str = "fisher_z",
) -> List[ScenarioSpec]:
    """The anchor cell plus every cell that differs from it in exactly one factor."""
    estimator, criteria = estimator or EstimatorConfig(), criteria or CriteriaConfig()
    specs = [_make_spec(anchor, master_seed, estimator, criteria, ci_method)]
    seen = {specs[0].id}
    for name, values in _factor_levels(factors).items():
        for level in values:
            spec = _make_spec(_with_level(anchor, name, level), master_seed, estimator, criteria, ci_method)
            if spec.id not in seen:
                seen.add(spec.id)
                specs.append(spec)
    return specs


def build_design(config: RunConfig) -> List[ScenarioSpec]:
    """Scenario list for a simulate run."""
    if config.seed is None:
        raise DomainError("a seed is required to build a simulation design")
    sim = config.simulation
    args = (config.seed, config.estimator, config.criteria, config.ci_method_for("simulate"))
    if sim.design == "grid":
        return expand_grid(sim.factors, config.scenario, *args)
    if sim.design == "one_at_a_time":
        return expand_one_at_a_time(config.scenario, sim.factors, *args)
    return [_make_spec(config.scenario, *args)]


def run_replicate(spec: ScenarioSpec, replicate: int) -> Dict[str, Any]:
    """One synthesize -> fit -> classify pass. Fit failures are recorded, not raised."""
    start = time.perf_counter()
    key = scenario_key(spec.id)
    row: Dict[str, Any] = {c: np.nan for c in REPLICATE_COLUMNS}
    row.update(scenario_id=spec.id, replicate=replicate, status="ok", error="", verdict="", flags="",
               clipped=0, zero_cell_trials=0)
    try:
        trials = synthesize_study(spec.population(), spec.scenario.resolved_trial_sizes(),
                                  spec.master_seed, key, replicate)
        row['censored_fraction'] = float(np.mean(np.concatenate([~t.event for t in trials])))
        rng = make_stream(spec.master_seed, key, replicate, BOOTSTRAP_SLOT)
        result = analyze_trials(trials, spec.estimator, spec.criteria, spec.ci_method, rng)
        est = result.estimates
        for name in ESTIMANDS:
            e = getattr(est, name)
            row[name], row[f"{name}_lo"], row[f"{name}_hi"] = e.est, e.lo, e.hi
        row['verdict'] = result.verdict.classification.value
        row['clipped'] = int(any(f.endswith("_clipped") for f in result.flags))
        row['zero_cell_trials'] = sum(m.logistic.zero_cell_corrected for m in result.marginals)
        row['flags'] = ";".join(result.flags)
    except (SurrobenchError, np.linalg.LinAlgError, FloatingPointError) as e:
        row['status'] = "failed"
        row['error'] = f"{type(e).__name__}: {e}"
        logger.debug(f"Scenario {spec.id} replicate {replicate} failed: {e}")
    row['seconds'] = time.perf_counter() - start
    return row


def _replicate_task(args):
    spec, replicate = args
    return run_replicate(spec, replicate)


def run_scenarios(
    specs: Sequence[ScenarioSpec],
    workers: int = 1,
    monitor: Optional[RunMonitor] = None,
    on_scenario_done: Optional[Callable[[ScenarioSpec, pd.DataFrame], None]] = None,
    failure_warning_fraction: float = 0.5,
) -> Dict[str, pd.DataFrame]:
    """
    Run every replicate of every scenario over a bounded worker pool.

    Returned tables are sorted by replicate, so output does not depend on
    the worker count or completion order.
    """
    tasks = [(spec, r) for spec in specs for r in range(spec.replications)]
    pending = {spec.id: spec.replications for spec in specs}
    by_id = {spec.id: spec for spec in specs}
    rows: Dict[str, List[Dict[str, Any]]] = {spec.id: [] for spec in specs}
    results: Dict[str, pd.DataFrame] = {}

    def collect(row):
        sid = row["scenario_id"]
        seconds = row.pop("seconds")
        rows[sid].append(row)
        if monitor is not None:
            monitor.record_replicate(seconds, failed=row["status"] != "ok")
        pending[sid] -= 1
        if pending[sid] == 0:
            table = replicate_table(rows.pop(sid))
            results[sid] = table
            if monitor is not None:
                monitor.record_scenario()
            _warn_failures(by_id[sid], table, failure_warning_fraction)
            if on_scenario_done is not None:
                on_scenario_done(by_id[sid], table)

    if workers <= 1:
        for task in tasks:
            collect(_replicate_task(task))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_replicate_task, task) for task in tasks]
            for future in as_completed(futures):
                collect(future.result())
    return {spec.id: results[spec.id] for spec in specs}


def run_scenario(spec: ScenarioSpec, workers: int = 1, monitor: Optional[RunMonitor] = None) -> pd.DataFrame:
    return run_scenarios([spec], workers, monitor)[spec.id]


def replicate_table(rows: Iterable[Dict[str, Any]]) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=REPLICATE_COLUMNS)
    return df.sort_values("replicate", kind="mergesort").reset_index(drop=True)


def _warn_failures(spec: ScenarioSpec, table: pd.DataFrame, fraction: float):
    failed = int((table["status"] != "ok").sum())
    if failed > fraction * len(table):
        logger.warning(f"Scenario {spec.id}: {failed}/{len(table)} replicates failed")


def metrics(estimates: Sequence[float], truth: float, allow_undefined: bool = False) -> Metrics:
    """
    Bias, per-replicate percent change and NRMSE of a set of estimates.

    Raises:
        DomainError: empty input, truth = 0 (percent change) or mean estimate = 0 (NRMSE),
            unless allow_undefined is set, in which case those entries are NaN
    """
    est = np.asarray(list(estimates), dtype=float)
    if est.size == 0:
        raise DomainError("metrics need at least one estimate")
    if not math.isfinite(truth):
        raise DomainError(f"truth must be finite, got {truth}")
    bias = float(est.mean() - truth)
    if truth == 0:
        if not allow_undefined:
            raise DomainError("percent change is undefined for truth = 0")
        percent = float("nan")
    else:
        percent = float(np.mean((est - truth) / truth) * 100.0)
    mean_est = float(est.mean())
    if mean_est == 0:
        if not allow_undefined:
            raise DomainError("NRMSE is undefined when the mean estimate is 0")
        nrmse = float("nan")
    else:
        nrmse = float(math.sqrt(np.mean((est - truth) ** 2)) / mean_est)
    return Metrics(bias, percent, nrmse)


@dataclass
class MetricsSummary:
    scenario_id: str
    factors: Dict[str, Any]
    metrics: Dict[str, Metrics]
    means: Dict[str, float]
    fvs_rate: float
    rls_rate: float
    n_ok: int
    n_failed: int
    n_clipped: int
    zero_cell_trials: int
    censored_fraction: float
    status: str

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {'scenario_id': self.scenario_id}
        f = dict(self.factors)
        alpha, beta = f.pop('effect_pair')
        sizes = f.pop('trial_sizes')
        row.update(f)
        row.update(alpha=alpha, beta=beta, trial_sizes=" ".join(map(str, sizes)) if sizes else "")
        row['stratum'] = "mixed" if f['trial_size'] == "mixed" or sizes else "equal"
        for name in ESTIMANDS:
            m = self.metrics[name]
            row[f"{name}_mean"] = self.means[name]
            row[f"{name}_bias"] = m.bias
            row[f"{name}_percent_change"] = m.percent_change
            row[f"{name}_nrmse"] = m.nrmse
        row.update(fvs_rate=self.fvs_rate, rls_rate=self.rls_rate, n_ok=self.n_ok, n_failed=self.n_failed,
                   n_clipped=self.n_clipped, zero_cell_trials=self.zero_cell_trials,
                   censored_fraction=self.censored_fraction, status=self.status)
        return row


def summarize_scenario(factors: Mapping[str, Any], table: pd.DataFrame,
                       failure_warning_fraction: float = 0.5) -> MetricsSummary:
    """Reduce one scenario's replicate table; failed replicates are counted and excluded."""
    ok = table[table['status'] == "ok"]
    n_ok, n_failed = len(ok), len(table) - len(ok)
    truths = {'r2_copula': factors['r2_true'], 'r2_wls': factors['r2_true'],
              'r2_adj': factors['r2_true'], 'global_or': factors['theta_true']}
    nan = Metrics(float("nan"), float("nan"), float("nan"))
    results, means = {}, {}
    for name in ESTIMANDS:
        if n_ok:
            results[name] = metrics(ok[name].to_numpy(dtype=float), float(truths[name]), allow_undefined=True)
            means[name] = float(ok[name].mean())
        else:
            results[name], means[name] = nan, float("nan")
    verdicts = ok['verdict']
    fvs = float(100.0 * (verdicts == VerdictClass.FVS.value).mean()) if n_ok else float("nan")
    rls = float(100.0 * verdicts.isin([VerdictClass.FVS.value, VerdictClass.RLS.value]).mean()) if n_ok else float("nan")
    status = "warning" if n_failed > failure_warning_fraction * len(table) else "ok"
    return MetricsSummary(
        scenario_id=str(table['scenario_id'].iloc[0]) if len(table) else "",
        factors=dict(factors),
        metrics=results,
        means=means,
        fvs_rate=fvs,
        rls_rate=rls,
        n_ok=n_ok,
        n_failed=n_failed,
        n_clipped=int(ok['clipped'].sum()),
        zero_cell_trials=int(ok['zero_cell_trials'].sum()),
        censored_fraction=float(table['censored_fraction'].mean()),
        status=status,
    )


MARGINAL_FACTORS = ("r2_true", "theta_true", "n_trials", "trial_size", "censor_rate", "effect")


def aggregate(summaries: Sequence[MetricsSummary]) -> Dict[str, pd.DataFrame]:
    """
    Scenario table, factor-marginal tables and (R2, theta) acceptance table.

    Marginals average scenario metrics over all other factors within a
    trial-size stratum; mixed-size scenarios form their own stratum.
    Acceptance rates pool verdicts over replicates.
    """
    if not summaries:
        raise DomainError("nothing to aggregate")
    scen = pd.DataFrame([s.to_row() for s in summaries])
    scen = scen.sort_values("scenario_id", kind="mergesort").reset_index(drop=True)
    scen["trial_size"] = scen["trial_size"].astype(str)
    scen["effect"] = scen["alpha"].map(repr) + "," + scen['beta'].map(repr)

    value_cols = [c for c in scen.columns
                  if c.endswith(("_mean", "_bias", "_percent_change", "_nrmse")) or c in ("fvs_rate", "rls_rate")]
    blocks = []
    for factor in MARGINAL_FACTORS:
        block = scen.groupby(["stratum", factor], sort=True, dropna=False)[value_cols].mean().reset_index()
        block = block.rename(columns={factor: "level"})
        block.insert(1, "factor", factor)
        block['level'] = block['level'].astype(str)
        blocks.append(block)
    marginal = pd.concat(blocks, ignore_index=True)

    scen['n_fvs'] = scen['fvs_rate'].fillna(0.0) * scen['n_ok'] / 100.0
    scen['n_rls_or_better'] = scen['rls_rate'].fillna(0.0) * scen['n_ok'] / 100.0
    pooled = scen.groupby(["r2_true", "theta_true"], sort=True)[["n_fvs", "n_rls_or_better", "n_ok"]].sum()
    acceptance = pd.DataFrame({
        'fvs_rate': 100.0 * pooled['n_fvs'] / pooled['n_ok'].where(pooled['n_ok'] > 0),
        'rls_or_better_rate': 100.0 * pooled['n_rls_or_better'] / pooled['n_ok'].where(pooled['n_ok'] > 0),
        'replicates': pooled['n_ok'].astype(int),
    }).reset_index()
    scen = scen.drop(columns=['effect', 'n_fvs', 'n_rls_or_better'])
    return {'scenario_metrics': scen, 'marginal_tables': marginal, 'acceptance_rates': acceptance}


def scatter_by_truth(tables: Mapping[str, pd.DataFrame], factors: Mapping[str, Mapping[str, Any]]) -> pd.DataFrame:
    """Per-replicate estimated R2 against estimated global OR, tagged with the true values."""
    frames = []
    for sid in sorted(tables):
        ok = tables[sid][tables[sid]['status'] == "ok"]
        frame = ok[['scenario_id', 'replicate', 'r2_copula', 'r2_wls', 'r2_adj', 'global_or', 'verdict']].copy()
        frame.insert(1, 'r2_true', factors[sid]['r2_true'])
        frame.insert(2, 'theta_true', factors[sid]['theta_true'])
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=['scenario_id', 'r2_true', 'theta_true', 'replicate', 'r2_copula',
                                     'r2_wls', 'r2_adj', 'global_or', 'verdict'])
    return pd.concat(frames, ignore_index=True)
