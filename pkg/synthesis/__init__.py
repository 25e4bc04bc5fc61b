"""Trial data generation."""

from .trial_synthesizer import (
    PatientRecord,
    PopulationParams,
    TrialDataset,
    TrialEffects,
    draw_trial_effects,
    mvn_sample,
    simulation_check,
    synthesize_study,
    synthesize_trial,
)

__all__ = [
    'PatientRecord', 'PopulationParams', 'TrialDataset', 'TrialEffects',
    'draw_trial_effects', 'mvn_sample', 'simulation_check', 'synthesize_study', 'synthesize_trial',
]
