"""
Command-line workbench: generate, fit, simulate and report.

Each mode reads a validated RunConfig, writes its outputs under
output.out_dir and echoes the resolved configuration next to them.
"""

import argparse
import logging
import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import pydantic
import scipy
import statsmodels

from estimation.marginal import fit_cox_covariate
from estimation.trial_level import scheme_weights
from harness.pipeline import AnalysisResult, analyze_trials
from harness.sim_harness import (
    ScenarioSpec,
    aggregate,
    build_design,
    run_scenarios,
    scatter_by_truth,
    summarize_scenario,
)
from synthesis.trial_synthesizer import TrialDataset, simulation_check, synthesize_study
from utils.io_utils import read_json, write_json_atomic
from utils.rng_utils import BOOTSTRAP_SLOT, make_stream, scenario_key

from .config import ConfigManager, RunConfig, available_presets
from .exceptions import ConfigError, EstimationError, SurrobenchError
from .ipd_io import export_ipd, ingest_ipd, write_csv_atomic
from .performance import RunMonitor

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

CHECK_SLOT = 2 ** 32 - 2
CHECK_TRIAL_SIZE = 20000
REPORT_FILES = ("scenario_metrics", "acceptance_rates", "marginal_tables", "scatter_by_truth")


def library_versions() -> Dict[str, str]:
    return {
        'surrobench': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pd.__version__,
        'statsmodels': statsmodels.__version__,
        'pydantic': pydantic.VERSION,
    }


class Workbench:
    """Runs one mode against a resolved configuration."""

    def __init__(self, config: RunConfig, manager: Optional[ConfigManager] = None):
        self.config = config
        self.manager = manager
        self.out_dir = Path(config.output.out_dir)
        self.monitor: Optional[RunMonitor] = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "Workbench":
        """Merge defaults, preset, config file, --set pairs and flags, then validate."""
        manager = ConfigManager(config_path=args.config, preset=args.preset)
        manager.apply_overrides(args.overrides or [])
        manager.set("mode", args.mode)
        if args.seed is not None:
            manager.set("seed", args.seed)
        if args.out is not None:
            manager.set("output.out_dir", args.out)
        if args.workers is not None:
            manager.set("simulation.workers", args.workers)
        if getattr(args, "ipd", None) is not None:
            manager.set("ipd_path", args.ipd)
        if args.log_level is not None:
            manager.set("log_level", args.log_level)
        config = manager.validate()
        if args.save_preset:
            manager.save_preset(args.save_preset)
        return cls(config, manager)

    def run(self) -> int:
        handler = {
            'generate': self.cmd_generate,
            'fit': self.cmd_fit,
            'simulate': self.cmd_simulate,
            'report': self.cmd_report,
        }[self.config.mode]
        handler()
        return 0

    def _write_resolved_config(self):
        write_json_atomic(self.config.model_dump(mode="json"), self.out_dir / "resolved_config.json")

    def _require_seed(self) -> int:
        if self.config.seed is None:
            raise ConfigError(f"mode '{self.config.mode}' needs a seed (--seed or 'seed' in the config)")
        return self.config.seed

    # ------------------------------------------------------------------ generate

    def cmd_generate(self) -> Dict[str, Any]:
        """Synthesize one multi-trial study, write it as IPD plus a manifest."""
        seed = self._require_seed()
        spec = ScenarioSpec(self.config.scenario, seed)
        key = scenario_key(spec.id)
        pop = spec.population()
        sizes = self.config.scenario.resolved_trial_sizes()
        trials = synthesize_study(pop, sizes, seed, key, 0)

        ipd_path = self.out_dir / self.config.output.ipd_file
        export_ipd(trials, ipd_path)

        events = np.concatenate([t.event for t in trials])
        check = simulation_check(pop, CHECK_TRIAL_SIZE, make_stream(seed, key, 0, CHECK_SLOT))
        manifest = {
            'seed': seed,
            'scenario_id': spec.id,
            'parameters': spec.factors(),
            'ipd_file': str(ipd_path),
            'n_trials': len(trials),
            'n_patients': int(events.size),
            'censored_fraction': float(1.0 - events.mean()),
            'trials': [
                dict(t.summary(), true_effects=_effects_dict(t.metadata['true_effects']))
                for t in trials
            ],
            'simulation_check': check,
            'versions': library_versions(),
        }
        write_json_atomic(manifest, self.out_dir / "generate_manifest.json")
        self._write_resolved_config()
        logger.info(f"Generated {len(trials)} trials, {events.size} patients, "
                    f"{manifest['censored_fraction']:.1%} censored -> {ipd_path}")
        return manifest

    # ------------------------------------------------------------------ fit

    def cmd_fit(self) -> Dict[str, Any]:
        """Fit all estimators to an IPD file and classify the surrogate."""
        if not self.config.ipd_path:
            raise ConfigError("fit needs an IPD file (--ipd or 'ipd_path' in the config)")
        trials = ingest_ipd(self.config.ipd_path)
        if len(trials) < 3:
            raise EstimationError(f"trial-level estimation needs at least 3 trials, got {len(trials)}")

        seed = self.config.seed
        if seed is None:
            seed = 0
            logger.info("No seed given; trial bootstrap uses seed 0")
        rng = make_stream(seed, 0, 0, BOOTSTRAP_SLOT)
        result = analyze_trials(trials, self.config.estimator, self.config.criteria,
                                self.config.ci_method_for("fit"), rng)

        est = result.estimates
        output = {
            'theta': est.global_or.to_dict(),
            'r2_copula': est.r2_copula.to_dict(),
            'r2_wls': est.r2_wls.to_dict(),
            'r2_adj': est.r2_adj.to_dict(),
            'verdict': result.verdict.to_dict(),
            'n_trials': len(trials),
            'n_patients': sum(t.n for t in trials),
            'ci_method': result.trial_level.ci_method,
            'second_stage_effects': self.config.estimator.second_stage_effects,
            'wls_line': {'intercept': result.trial_level.intercept, 'slope': result.trial_level.slope,
                         'weights': result.trial_level.weights_used},
            'dispersion': {'d_aa': result.trial_level.dispersion.d_aa,
                           'd_ab': result.trial_level.dispersion.d_ab,
                           'd_bb': result.trial_level.dispersion.d_bb},
            'joint_fit': {'loglik': result.joint.loglik, 'iterations': result.joint.iterations,
                          'converged': result.joint.converged,
                          'profile_curvature': result.joint.profile_curvature},
            'flags': list(result.flags),
        }
        write_json_atomic(output, self.out_dir / "estimates.json")
        write_csv_atomic(effects_table(trials, result), self.out_dir / "effects.csv")
        write_csv_atomic(scatter_table(trials, result), self.out_dir / "scatter.csv")
        self._write_resolved_config()
        logger.info(f"theta={est.global_or.est:.3f} R2_copula={est.r2_copula.est:.3f} "
                    f"R2_wls={est.r2_wls.est:.3f} -> {result.verdict.classification.value}")
        return output

    # ------------------------------------------------------------------ simulate

    def _scenario_paths(self, sid: str):
        base = self.out_dir / "scenarios"
        return base / f"{sid}.csv", base / f"{sid}.json"

    def _load_completed(self, spec: ScenarioSpec) -> Optional[pd.DataFrame]:
        csv_path, json_path = self._scenario_paths(spec.id)
        if not (csv_path.exists() and json_path.exists()):
            return None
        table = pd.read_csv(csv_path, keep_default_na=True, dtype={'error': str, 'flags': str, 'verdict': str})
        if len(table) != spec.replications:
            logger.warning(f"Scenario {spec.id}: stored table has {len(table)} rows, "
                           f"expected {spec.replications}; rerunning")
            return None
        return table.fillna({'error': "", 'flags': "", 'verdict': ""})

    def _save_scenario(self, spec: ScenarioSpec, table: pd.DataFrame):
        csv_path, json_path = self._scenario_paths(spec.id)
        write_csv_atomic(table, csv_path)
        write_json_atomic({'scenario_id': spec.id, 'factors': spec.factors(),
                           'replications': spec.replications, 'master_seed': spec.master_seed},
                          json_path)

    def cmd_simulate(self) -> Dict[str, pd.DataFrame]:
        """Run the scenario design, persisting each scenario as it finishes."""
        self._require_seed()
        sim = self.config.simulation
        specs = build_design(self.config)
        logger.info(f"Design '{sim.design}': {len(specs)} scenarios, "
                    f"{sum(s.replications for s in specs)} replicates, {sim.workers} worker(s)")

        tables: Dict[str, pd.DataFrame] = {}
        todo: List[ScenarioSpec] = []
        for spec in specs:
            stored = self._load_completed(spec) if sim.resume else None
            if stored is not None:
                tables[spec.id] = stored
            else:
                todo.append(spec)
        if tables:
            logger.info(f"Resuming: {len(tables)} scenarios already complete")

        self.monitor = RunMonitor(total_replicates=sum(s.replications for s in todo))
        tables.update(run_scenarios(todo, sim.workers, self.monitor, self._save_scenario,
                                    sim.failure_warning_fraction))
        factors = {spec.id: spec.factors() for spec in specs}
        report = self._write_report(tables, factors)

        stats = self.monitor.get_stats()
        manifest = {
            'config': self.config.model_dump(mode="json"),
            'versions': library_versions(),
            'scenarios': len(specs),
            'scenarios_resumed': len(specs) - len(todo),
            'replicates_failed_total': int(sum((t['status'] != "ok").sum() for t in tables.values())),
            'warning_scenarios': sorted(
                sid for sid, t in tables.items()
                if (t['status'] != "ok").sum() > sim.failure_warning_fraction * len(t)
            ),
            'run_stats': stats,
        }
        write_json_atomic(manifest, self.out_dir / "run_manifest.json")
        self._write_resolved_config()
        self.monitor.log_stats()
        return report

    def _write_report(self, tables: Dict[str, pd.DataFrame],
                      factors: Dict[str, Dict[str, Any]]) -> Dict[str, pd.DataFrame]:
        fraction = self.config.simulation.failure_warning_fraction
        summaries = [summarize_scenario(factors[sid], tables[sid], fraction) for sid in sorted(tables)]
        report = aggregate(summaries)
        report['scatter_by_truth'] = scatter_by_truth(tables, factors)
        for name in REPORT_FILES:
            write_csv_atomic(report[name], self.out_dir / f"{name}.csv")
        logger.info(f"Wrote report tables for {len(summaries)} scenarios to {self.out_dir}")
        return report

    # ------------------------------------------------------------------ report

    def cmd_report(self) -> Dict[str, pd.DataFrame]:
        """Rebuild the report tables from stored per-scenario results."""
        scen_dir = self.out_dir / "scenarios"
        metas = sorted(scen_dir.glob("*.json")) if scen_dir.is_dir() else []
        if not metas:
            raise ConfigError(f"no stored scenarios under {scen_dir}")
        tables, factors = {}, {}
        for meta_path in metas:
            meta = read_json(meta_path)
            csv_path = meta_path.with_suffix(".csv")
            if not csv_path.exists():
                logger.warning(f"Scenario {meta['scenario_id']} has no replicate table; skipped")
                continue
            table = pd.read_csv(csv_path, dtype={'error': str, 'flags': str, 'verdict': str})
            tables[meta['scenario_id']] = table.fillna({'error': "", 'flags': "", 'verdict': ""})
            factors[meta['scenario_id']] = meta['factors']
        report = self._write_report(tables, factors)
        self._write_resolved_config()
        return report


def _effects_dict(effects) -> Dict[str, float]:
    return {'gamma_i': effects.gamma_i, 'log_lambda0_i': effects.log_lambda0_i,
            'alpha_i': effects.alpha_i, 'beta_i': effects.beta_i}


def effects_table(trials: Sequence[TrialDataset], result: AnalysisResult) -> pd.DataFrame:
    """Per-trial OR, HR and HR by surrogate status with 95% intervals."""
    ties = result.marginals[0].cox.ties if result.marginals else "efron"
    rows = []
    for data, m, joint in zip(trials, result.marginals, result.joint.per_trial):
        or_lo, or_hi = m.logistic.or_ci
        hr_lo, hr_hi = m.cox.hr_ci
        row = {
            'trial_id': m.trial_id, 'n': m.n, 'events': m.cox.n_events,
            'log_or': m.logistic.alpha_hat, 'log_or_se': m.logistic.se_alpha,
            'or': m.logistic.odds_ratio, 'or_lo': or_lo, 'or_hi': or_hi,
            'log_hr': m.cox.beta_hat, 'log_hr_se': m.cox.se_beta,
            'hr': m.cox.hazard_ratio, 'hr_lo': hr_lo, 'hr_hi': hr_hi,
            'hr_surrogate': np.nan, 'hr_surrogate_lo': np.nan, 'hr_surrogate_hi': np.nan,
            'joint_alpha': joint.alpha_i, 'joint_beta': joint.beta_i,
            'zero_cell_corrected': int(m.logistic.zero_cell_corrected),
        }
        try:
            by_surrogate = fit_cox_covariate(data, "surrogate", ties)
            row['hr_surrogate'] = by_surrogate.hazard_ratio
            row['hr_surrogate_lo'], row['hr_surrogate_hi'] = by_surrogate.hr_ci
        except SurrobenchError as e:
            logger.warning(f"Trial {m.trial_id}: no HR by surrogate status ({e})")
        rows.append(row)
    return pd.DataFrame(rows)


def scatter_table(trials: Sequence[TrialDataset], result: AnalysisResult) -> pd.DataFrame:
    """Stage-two effect pairs with the fitted weighted line."""
    tl = result.trial_level
    a = np.array([e.alpha_i for e in result.stage_two_effects])
    b = np.array([e.beta_i for e in result.stage_two_effects])
    weights = scheme_weights(result.stage_two_effects, [t.n for t in trials], tl.weights_used)
    return pd.DataFrame({
        'trial_id': [e.trial_id for e in result.stage_two_effects],
        'n': [t.n for t in trials],
        'log_or': a,
        'log_hr': b,
        'weight': weights,
        'fitted_log_hr': tl.intercept + tl.slope * a,
    })


class _ListPresets(argparse.Action):
    """Print the available preset names and exit."""

    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest=dest, default=default, nargs=0, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        print("\n".join(available_presets()))
        parser.exit()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--preset", help="named preset from the presets directory")
    common.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. --set scenario.n_trials=20")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for simulate")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--save-preset", metavar="NAME", help="store the merged configuration as a named preset")

    parser = argparse.ArgumentParser(
        prog="surrobench",
        description="Validate a binary surrogate for a survival endpoint in meta-analytic trial data",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--list-presets", action=_ListPresets, help="list named presets and exit")
    sub = parser.add_subparsers(dest="mode", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize a multi-trial IPD file")
    fit = sub.add_parser("fit", parents=[common], help="fit estimators and classify from an IPD file")
    fit.add_argument("--ipd", help="IPD CSV path")
    sub.add_parser("simulate", parents=[common], help="run the Monte Carlo scenario design")
    sub.add_parser("report", parents=[common], help="rebuild report tables from stored scenarios")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level or "INFO"),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        workbench = Workbench.from_args(args)
        logging.getLogger().setLevel(workbench.config.log_level)
        return workbench.run()
    except SurrobenchError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted; completed scenarios are kept for resume")
        return 130


if __name__ == "__main__":
    sys.exit(main())
