"""
Individual patient data (IPD) CSV reading and writing.

Header: trial_id,patient_id,treatment,surrogate,time,event. Numbers are
written with 17 significant digits so a write/read cycle is exact.
"""

import os
from pathlib import Path
from typing import List, Sequence, Union
import logging

import numpy as np
import pandas as pd

from synthesis.trial_synthesizer import TrialDataset
from .exceptions import DataValidationError

logger = logging.getLogger(__name__)

IPD_COLUMNS = ["trial_id", "patient_id", "treatment", "surrogate", "time", "event"]
FLOAT_FORMAT = "%.17g"


def _row_number(df: pd.DataFrame, mask: pd.Series) -> int:
    # header is line 1, first data row is line 2
    return int(np.flatnonzero(mask.to_numpy())[0]) + 2


def _check_binary(df: pd.DataFrame, column: str):
    values = pd.to_numeric(df[column], errors="coerce")
    bad = ~values.isin([0, 1])
    if bad.any():
        row = _row_number(df, bad)
        raise DataValidationError(f"column '{column}' must be 0 or 1, got {df[column].iloc[row - 2]!r}", row=row)
    df[column] = values.astype(np.int8)


def ingest_ipd(path: Union[str, Path]) -> List[TrialDataset]:
    """
    Read and validate an IPD CSV, grouping rows by trial in order of first appearance.

    Raises:
        DataValidationError: unreadable file, wrong header, bad values (with row
            number), duplicate (trial_id, patient_id), or a single-arm trial
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"trial_id": str, "patient_id": str}, keep_default_na=False)
    except FileNotFoundError:
        raise DataValidationError(f"IPD file not found: {path}")
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataValidationError(f"cannot parse {path}: {e}")
    if list(df.columns) != IPD_COLUMNS:
        raise DataValidationError(f"header must be {','.join(IPD_COLUMNS)}, got {','.join(map(str, df.columns))}", row=1)
    if df.empty:
        raise DataValidationError(f"{path} has no data rows")

    for column in ("trial_id", "patient_id"):
        blank = df[column].str.strip() == ""
        if blank.any():
            raise DataValidationError(f"empty {column}", row=_row_number(df, blank))
    _check_binary(df, "treatment")
    _check_binary(df, "surrogate")
    _check_binary(df, "event")
    times = pd.to_numeric(df["time"], errors="coerce")
    bad = ~(times > 0) | ~np.isfinite(times)
    if bad.any():
        row = _row_number(df, bad)
        raise DataValidationError(f"time must be a positive number, got {df['time'].iloc[row - 2]!r}", row=row)
    df["time"] = times.astype(float)

    dup = df.duplicated(["trial_id", "patient_id"])
    if dup.any():
        row = _row_number(df, dup)
        raise DataValidationError(f"duplicate patient {df['patient_id'].iloc[row - 2]!r}",
                                  row=row, trial_id=df['trial_id'].iloc[row - 2])

    trials = []
    for trial_id in pd.unique(df["trial_id"]):
        part = df[df["trial_id"] == trial_id]
        if part["treatment"].nunique() < 2:
            raise DataValidationError("trial has a single treatment arm", trial_id=trial_id)
        data = TrialDataset(
            trial_id=trial_id,
            time=part["time"].to_numpy(),
            event=part["event"].to_numpy().astype(bool),
            surrogate=part["surrogate"].to_numpy(),
            treatment=part["treatment"].to_numpy(),
            patient_id=part["patient_id"].to_numpy(),
        )
        s = data.summary()
        logger.info(
            f"Trial {trial_id}: n={s['n']}, events={s['events']}, censored={s['censored_fraction']:.1%}, "
            f"response control={s['response_rate_control']:.1%} treated={s['response_rate_treated']:.1%}"
        )
        trials.append(data)
    logger.info(f"Ingested {len(trials)} trials ({len(df)} patients) from {path}")
    return trials


def ipd_frame(trials: Sequence[TrialDataset]) -> pd.DataFrame:
    frames = [
        pd.DataFrame({
            "trial_id": t.trial_id,
            "patient_id": t.patient_id,
            "treatment": t.treatment.astype(int),
            "surrogate": t.surrogate.astype(int),
            "time": t.time,
            "event": t.event.astype(int),
        })
        for t in trials
    ]
    return pd.concat(frames, ignore_index=True)[IPD_COLUMNS]


def write_csv_atomic(df: pd.DataFrame, path: Union[str, Path]):
    """Write a CSV through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    df.to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    os.replace(tmp, path)


def export_ipd(trials: Sequence[TrialDataset], path: Union[str, Path]):
    """Inverse of ingest_ipd."""
    write_csv_atomic(ipd_frame(trials), path)
    logger.info(f"Wrote {sum(t.n for t in trials)} patient rows to {path}")
