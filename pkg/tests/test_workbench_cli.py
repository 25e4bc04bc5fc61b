#!/usr/bin/env python3
"""
End-to-end tests for the workbench command line.
"""

import json
import sys
from pathlib import Path

import pandas as pd
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import core.config
from core.config import CriteriaConfig, EstimatorConfig
from core.ipd_io import ingest_ipd
from core.workbench_cli import REPORT_FILES, build_parser, main
from harness.pipeline import analyze_trials
from utils.rng_utils import BOOTSTRAP_SLOT, make_stream

SMALL_STUDY = ["--set", "scenario.n_trials=6", "--set", "scenario.trial_size=300"]
SMALL_SIM = ["--set", "scenario.n_trials=5", "--set", "scenario.trial_size=200",
             "--set", "scenario.replications=2", "--set", "simulation.design=single", "--workers", "1"]


def _read(path):
    return json.loads(Path(path).read_text())


class TestParser:
    """Argument surface."""

    def test_subcommands(self):
        args = build_parser().parse_args(["fit", "--ipd", "x.csv", "--seed", "3", "--set", "a=1", "--set", "b=2"])
        assert args.mode == "fit"
        assert args.ipd == "x.csv"
        assert args.seed == 3
        assert args.overrides == ["a=1", "b=2"]

    def test_mode_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_list_presets(self, capsys):
        """--list-presets prints the shipped presets and exits cleanly."""
        with pytest.raises(SystemExit) as exc:
            main(["--list-presets"])
        assert exc.value.code == 0
        names = capsys.readouterr().out.split()
        assert "table1" in names
        assert "realdata" in names

    def test_save_preset_round_trips(self, tmp_path, monkeypatch):
        """A saved preset holds the merged overrides and can be loaded back by name."""
        monkeypatch.setattr(core.config, "PRESET_DIR", tmp_path / "presets")
        out = tmp_path / "gen"
        assert main(["generate", "--seed", "3", "--out", str(out), "--save-preset", "mine"] + SMALL_STUDY) == 0
        saved = _read(tmp_path / "presets" / "mine.json")
        assert saved['scenario']['n_trials'] == 6
        assert saved['scenario']['trial_size'] == 300
        assert core.config.available_presets() == ["mine"]
        again = tmp_path / "again"
        assert main(["generate", "--seed", "3", "--out", str(again), "--preset", "mine"]) == 0
        assert (again / "ipd.csv").read_bytes() == (out / "ipd.csv").read_bytes()


class TestExitCodes:
    """Errors map to documented exit codes."""

    def test_generate_without_seed(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, tmp_path):
        assert main(["generate", "--seed", "1", "--out", str(tmp_path), "--set", "scenario.bogus=1"]) == 2

    def test_missing_preset(self, tmp_path):
        assert main(["simulate", "--seed", "1", "--out", str(tmp_path), "--preset", "nope"]) == 2

    def test_fit_without_ipd(self, tmp_path):
        assert main(["fit", "--out", str(tmp_path)]) == 2

    def test_fit_on_bad_ipd(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("trial,patient\nA,1\n")
        assert main(["fit", "--ipd", str(bad), "--out", str(tmp_path)]) == 3

    def test_report_without_scenarios(self, tmp_path):
        assert main(["report", "--out", str(tmp_path)]) == 2


class TestGenerateAndFit:
    """Synthesize a study, then analyse it."""

    @pytest.fixture
    def generated(self, tmp_path):
        out = tmp_path / "gen"
        assert main(["generate", "--seed", "17", "--out", str(out)] + SMALL_STUDY) == 0
        return out

    def test_generate_outputs(self, generated):
        assert (generated / "ipd.csv").exists()
        manifest = _read(generated / "generate_manifest.json")
        assert manifest['seed'] == 17
        assert manifest['n_trials'] == 6
        assert manifest['n_patients'] == 1800
        assert len(manifest['trials']) == 6
        assert 'alpha_i' in manifest['trials'][0]['true_effects']
        assert _read(generated / "resolved_config.json")['seed'] == 17

    def test_generate_is_reproducible(self, generated, tmp_path):
        again = tmp_path / "again"
        assert main(["generate", "--seed", "17", "--out", str(again)] + SMALL_STUDY) == 0
        assert (again / "ipd.csv").read_bytes() == (generated / "ipd.csv").read_bytes()

    def test_fit_outputs(self, generated, tmp_path):
        out = tmp_path / "fit"
        code = main(["fit", "--ipd", str(generated / "ipd.csv"), "--seed", "5", "--out", str(out),
                     "--set", "estimator.bootstrap_resamples=50"])
        assert code == 0
        est = _read(out / "estimates.json")
        assert est['n_trials'] == 6
        assert est['ci_method'] == "trial_bootstrap"
        assert est['verdict']['class'] in ("FVS", "RLS", "NotEstablished")
        for name in ("r2_copula", "r2_wls", "r2_adj"):
            assert 0.0 <= est[name]['lo'] <= est[name]['est'] <= est[name]['hi'] <= 1.0
        assert est['theta']['lo'] <= est['theta']['est'] <= est['theta']['hi']

        effects = pd.read_csv(out / "effects.csv")
        assert len(effects) == 6
        scatter = pd.read_csv(out / "scatter.csv")
        assert len(scatter) == 6

    def test_fit_needs_three_trials(self, tmp_path):
        gen = tmp_path / "two"
        assert main(["generate", "--seed", "2", "--out", str(gen),
                     "--set", "scenario.n_trials=2", "--set", "scenario.trial_size=200"]) == 0
        assert main(["fit", "--ipd", str(gen / "ipd.csv"), "--out", str(tmp_path / "fit")]) == 4

    def test_fit_matches_library_analysis(self, generated, tmp_path):
        """The fit command writes exactly what the library pipeline computes for the same stream."""
        out = tmp_path / "fit"
        assert main(["fit", "--ipd", str(generated / "ipd.csv"), "--seed", "5", "--out", str(out),
                     "--set", "estimator.bootstrap_resamples=50"]) == 0
        est = _read(out / "estimates.json")

        result = analyze_trials(ingest_ipd(generated / "ipd.csv"), EstimatorConfig(bootstrap_resamples=50),
                                CriteriaConfig(), "trial_bootstrap", make_stream(5, 0, 0, BOOTSTRAP_SLOT))
        expected = result.estimates
        for name, value in (("theta", expected.global_or), ("r2_copula", expected.r2_copula),
                            ("r2_wls", expected.r2_wls), ("r2_adj", expected.r2_adj)):
            for key, number in value.to_dict().items():
                assert est[name][key] == pytest.approx(number, abs=1e-10), f"{name}.{key}"
        assert est['verdict']['class'] == result.verdict.to_dict()['class']


class TestSimulateAndReport:
    """Small single-scenario run, resume and report rebuild."""

    def test_simulate_resume_and_report(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--seed", "11", "--out", str(out)] + SMALL_SIM) == 0
        for name in REPORT_FILES:
            assert (out / f"{name}.csv").exists()
        manifest = _read(out / "run_manifest.json")
        assert manifest['scenarios'] == 1
        assert manifest['scenarios_resumed'] == 0
        first = {name: pd.read_csv(out / f"{name}.csv") for name in REPORT_FILES}

        assert main(["simulate", "--seed", "11", "--out", str(out)] + SMALL_SIM) == 0
        assert _read(out / "run_manifest.json")['scenarios_resumed'] == 1
        for name in REPORT_FILES:
            pd.testing.assert_frame_equal(pd.read_csv(out / f"{name}.csv"), first[name], check_dtype=False)

        (out / "scenario_metrics.csv").unlink()
        assert main(["report", "--out", str(out)]) == 0
        pd.testing.assert_frame_equal(pd.read_csv(out / "scenario_metrics.csv"), first["scenario_metrics"],
                                      check_dtype=False)

    def test_worker_count_does_not_change_reports(self, tmp_path):
        """Replicate streams are keyed, so the pool size leaves every report byte-identical."""
        design = ["--set", "scenario.n_trials=5", "--set", "scenario.trial_size=200",
                  "--set", "scenario.replications=4", "--set", "simulation.design=single"]
        serial, pooled = tmp_path / "serial", tmp_path / "pooled"
        assert main(["simulate", "--seed", "23", "--out", str(serial), "--workers", "1"] + design) == 0
        assert main(["simulate", "--seed", "23", "--out", str(pooled), "--workers", "8"] + design) == 0
        for name in REPORT_FILES:
            assert (pooled / f"{name}.csv").read_bytes() == (serial / f"{name}.csv").read_bytes(), name


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
