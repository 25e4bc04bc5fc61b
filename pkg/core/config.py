"""
Run configuration for surrobench.

A nested defaults dict merged with a preset, a JSON config file and
command-line overrides, then validated by strict pydantic models.
"""

import copy
import json
import math
import os
import threading
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union
import logging

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

WORKERS_ENV = "SURROBENCH_WORKERS"
PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"
MIXED_SIZES = (300, 500, 1000)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScenarioConfig(_Strict):
    """One cell of the simulation design (also the generator settings)."""

    r2_true: float = Field(0.65, ge=0.0, le=1.0, description="trial-level R2 of (alpha_i, beta_i)")
    theta_true: float = Field(3.0, gt=0.0, description="true global odds ratio")
    n_trials: int = Field(10, ge=1)
    trial_size: Union[int, Literal["mixed"]] = Field(300, description="patients per trial, or 'mixed'")
    trial_sizes: Optional[List[int]] = Field(None, description="explicit per-trial sizes, overrides trial_size")
    censor_rate: float = Field(0.05, ge=0.0, lt=1.0, description="one-year censoring probability")
    alpha: float = 0.8
    beta: float = -0.74
    gamma: float = Field(math.log(0.4 / 0.6), description="control log-odds of response")
    log_lambda0: float = Field(math.log(0.15), description="log control hazard per year")
    t_assess: float = Field(0.5, ge=0.0, description="surrogate assessment time in years")
    replications: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_sizes(self):
        if isinstance(self.trial_size, int) and self.trial_size < 2:
            raise ValueError("trial_size must be >= 2")
        if self.trial_sizes is not None:
            if not self.trial_sizes or any(n < 2 for n in self.trial_sizes):
                raise ValueError("trial_sizes must be non-empty and every size >= 2")
            if self.n_trials != len(self.trial_sizes):
                raise ValueError(f"n_trials={self.n_trials} but {len(self.trial_sizes)} trial_sizes given")
        return self

    def resolved_trial_sizes(self) -> List[int]:
        """Per-trial sizes; the mixed design cycles 300, 500, 1000 in index order."""
        if self.trial_sizes is not None:
            return list(self.trial_sizes)
        if self.trial_size == "mixed":
            return [MIXED_SIZES[i % len(MIXED_SIZES)] for i in range(self.n_trials)]
        return [int(self.trial_size)] * self.n_trials


class FactorConfig(_Strict):
    """Factor levels of the simulation grid. Defaults are the full design."""

    r2_true: List[float] = [0.3, 0.65, 0.95]
    theta_true: List[float] = [1.0, 3.0, 7.0]
    n_trials: List[int] = [10, 20, 30]
    trial_size: List[Union[int, Literal["mixed"]]] = [300, 1000]
    censor_rate: List[float] = [0.05, 0.10, 0.15]
    effect_pair: List[Tuple[float, float]] = [(0.8, -0.74), (0.3, -0.25), (1.2, -1.05)]

    @model_validator(mode="after")
    def _non_empty(self):
        for name in type(self).model_fields:
            if not getattr(self, name):
                raise ValueError(f"factor '{name}' has no levels")
        return self


class SimulationConfig(_Strict):
    design: Literal["grid", "one_at_a_time", "single"] = "single"
    factors: FactorConfig = FactorConfig()
    workers: int = Field(1, ge=1)
    failure_warning_fraction: float = Field(0.5, ge=0.0, le=1.0)
    resume: bool = True


class EstimatorConfig(_Strict):
    ties: Literal["efron", "breslow"] = "efron"
    wls_weights: Literal["sample_size", "inverse_sample_size"] = "sample_size"
    ci_method: Optional[Literal["fisher_z", "trial_bootstrap"]] = Field(
        None, description="None picks fisher_z for simulate and trial_bootstrap for fit")
    bootstrap_resamples: int = Field(2000, ge=10)
    second_stage_effects: Literal["marginal", "joint"] = "marginal"
    dispersion: Literal["raw", "adjusted"] = "raw"
    theta_bounds: Tuple[float, float] = (0.05, 400.0)
    profile_grid_points: int = Field(15, ge=3)
    inner_tol: float = Field(1e-8, gt=0.0)
    inner_max_iter: int = Field(50, ge=1)
    outer_xatol: float = Field(1e-6, gt=0.0)
    max_inner_failure_fraction: float = Field(0.2, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_bounds(self):
        lo, hi = self.theta_bounds
        if not 0.0 < lo < 1.0 < hi:
            raise ValueError("theta_bounds must satisfy 0 < lower < 1 < upper")
        return self


class CriteriaConfig(_Strict):
    rule_set: Literal["i2teamm"] = "i2teamm"
    cl_applies_to: Literal["max", "both", "either"] = "max"
    r2_threshold: float = 0.8
    r2_floor: float = 0.7
    fvs_r2_lower: float = 0.6
    rls_r2_lower: float = 0.5
    or_threshold: float = 3.0
    or_lower: float = 1.0


class OutputConfig(_Strict):
    out_dir: str = "runs/latest"
    ipd_file: str = "ipd.csv"


class RunConfig(_Strict):
    """Fully resolved configuration of one workbench run."""

    mode: Literal["generate", "fit", "simulate", "report"] = "simulate"
    seed: Optional[int] = Field(None, ge=0)
    ipd_path: Optional[str] = None
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    scenario: ScenarioConfig = ScenarioConfig()
    simulation: SimulationConfig = SimulationConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    criteria: CriteriaConfig = CriteriaConfig()
    output: OutputConfig = OutputConfig()

    def ci_method_for(self, mode: str) -> str:
        if self.estimator.ci_method is not None:
            return self.estimator.ci_method
        return "trial_bootstrap" if mode == "fit" else "fisher_z"


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class ConfigManager:
    """Layered configuration: defaults < preset < file < overrides."""

    DEFAULTS: Dict[str, Any] = RunConfig().model_dump(mode="json")

    def __init__(self, config_path: Optional[str] = None, preset: Optional[str] = None):
        self.config_path = config_path
        self._lock = threading.Lock()
        self._config = copy.deepcopy(self.DEFAULTS)
        self._apply_environment()
        if preset:
            self.load_preset(preset)
        if config_path:
            self._deep_merge(self._config, self._read_json(Path(config_path)))
            logger.info(f"Loaded configuration from {config_path}")

    def _apply_environment(self):
        workers = os.environ.get(WORKERS_ENV)
        if workers is None:
            return
        try:
            self._config["simulation"]["workers"] = int(workers)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {workers!r}")
        logger.debug(f"Default worker count {workers} from {WORKERS_ENV}")

    @staticmethod
    def _read_json(path: Path) -> Dict[str, Any]:
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return loaded

    def _deep_merge(self, base: dict, updates: dict):
        """Deep merge updates into base dictionary."""
        for key, value in updates.items():
            if key in base and isinstance(base[key], dict) and isinstance(value, dict):
                self._deep_merge(base[key], value)
            else:
                base[key] = copy.deepcopy(value)

    def get(self, key: str, default: Any = None) -> Any:
        """Get a value by dotted key."""
        with self._lock:
            value = self._config
            for part in key.split('.'):
                if isinstance(value, dict) and part in value:
                    value = value[part]
                else:
                    return default
            return value

    def set(self, key: str, value: Any):
        """Set a value by dotted key. Unknown keys are caught by validate()."""
        with self._lock:
            parts = key.split('.')
            target = self._config
            for part in parts[:-1]:
                if not isinstance(target.get(part), dict):
                    target[part] = {}
                target = target[part]
            target[parts[-1]] = value

    def apply_overrides(self, pairs: List[str]):
        """Apply 'dotted.key=value' strings; values are parsed as JSON when possible."""
        for pair in pairs:
            if '=' not in pair:
                raise ConfigError(f"override must look like key=value, got {pair!r}")
            key, text = pair.split('=', 1)
            self.set(key.strip(), _parse_value(text.strip()))

    def validate(self) -> RunConfig:
        """Validate the merged dict; unknown keys and bad values raise ConfigError."""
        with self._lock:
            snapshot = copy.deepcopy(self._config)
        try:
            return RunConfig.model_validate(snapshot)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(f"invalid configuration: {problems}") from e

    def as_dict(self) -> Dict[str, Any]:
        with self._lock:
            return copy.deepcopy(self._config)

    def save(self, path: Union[str, Path]):
        """Write the current configuration atomically (temp file then rename)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_path = path.with_name(path.name + ".tmp")
        with open(temp_path, 'w', encoding='utf-8') as f:
            json.dump(self.as_dict(), f, indent=2, sort_keys=True)
        os.replace(temp_path, path)
        logger.info(f"Saved configuration to {path}")

    def save_preset(self, name: str, preset_dir: Optional[Path] = None):
        """Save current configuration as a preset."""
        self.save((preset_dir or PRESET_DIR) / f"{name}.json")
        logger.info(f"Saved preset: {name}")

    def load_preset(self, name: str, preset_dir: Optional[Path] = None):
        """Merge a named preset over the current values."""
        preset_path = (preset_dir or PRESET_DIR) / f"{name}.json"
        if not preset_path.exists():
            available = sorted(p.stem for p in (preset_dir or PRESET_DIR).glob("*.json"))
            raise ConfigError(f"preset not found: {name} (available: {', '.join(available) or 'none'})")
        with self._lock:
            self._deep_merge(self._config, self._read_json(preset_path))
        logger.info(f"Loaded preset: {name}")


def available_presets(preset_dir: Optional[Path] = None) -> List[str]:
    return sorted(p.stem for p in (preset_dir or PRESET_DIR).glob("*.json"))
