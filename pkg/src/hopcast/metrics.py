"""Calibration error, interval width and point accuracy over interval sheets."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


def _truth(sheet, truth):
    truth = sheet.truth if truth is None else np.asarray(truth, dtype=float)
    if truth is None:
        raise ValueError("no ground truth supplied")
    if truth.shape != sheet.raw.shape:
        raise ValueError(f"truth shape {truth.shape} does not match sheet {sheet.raw.shape}")
    if truth.size == 0:
        raise ValueError("empty evaluation set")
    return truth


def observed_coverage(sheet, truth=None) -> np.ndarray:
    """Fraction of points with ``lower <= truth <= upper``; ``C x levels``."""
    truth = _truth(sheet, truth)[..., None]
    inside = (sheet.lower <= truth) & (truth <= sheet.upper)
    c = truth.shape[2]
    return inside.reshape(-1, c, inside.shape[-1]).mean(axis=0)


def calibration_error(sheet, truth=None):
    """``sum_i (p_hat_i - p_i)^2`` per channel, and the channel mean."""
    p_hat = observed_coverage(sheet, truth)
    per_channel = np.sum((p_hat - np.asarray(sheet.levels)[None]) ** 2, axis=1)
    return per_channel, float(per_channel.mean())


def pi_width(sheet):
    """Mean ``|upper - lower|`` over levels and points, per channel and averaged."""
    if sheet.lower.size == 0:
        raise ValueError("empty interval sheet")
    width = np.abs(sheet.upper - sheet.lower)
    per_channel = width.reshape(-1, width.shape[2], width.shape[3]).mean(axis=(0, 2))
    return per_channel, float(per_channel.mean())


def mse(prediction, truth):
    """Mean squared error per channel (last axis) and averaged."""
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape:
        raise ValueError("prediction and truth are not aligned")
    sq = (prediction - truth) ** 2
    per_channel = sq.reshape(-1, sq.shape[-1]).mean(axis=0)
    return per_channel, float(per_channel.mean())


@dataclass
class CalibrationReport:
    """Per-channel calibration curve and headline metrics."""

    method: str
    levels: np.ndarray
    observed: np.ndarray
    ce: np.ndarray
    width: np.ndarray
    mse: np.ndarray
    mse_clean: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def ce_mean(self) -> float:
        return float(np.mean(self.ce))

    @property
    def width_mean(self) -> float:
        return float(np.mean(self.width))

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.mse))

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "levels": [float(x) for x in self.levels],
            "ce": self.ce_mean, "pi_width": self.width_mean, "mse": self.mse_mean,
            "per_channel": {
                "ce": self.ce.tolist(), "pi_width": self.width.tolist(), "mse": self.mse.tolist(),
                "observed": self.observed.tolist(),
            },
        }
        if self.mse_clean is not None:
            out["mse_clean"] = float(np.mean(self.mse_clean))
            out["per_channel"]["mse_clean"] = self.mse_clean.tolist()
        out.update(self.meta)
        return out

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "level", "p", "p_hat"])
            for ch in range(self.observed.shape[0]):
                for j, p in enumerate(self.levels):
                    w.writerow([ch, j, f"{p:.1f}", repr(float(self.observed[ch, j]))])


def evaluate_sheet(sheet, truth=None, clean=None, t_slice=slice(1, None)) -> CalibrationReport:
    """All metrics for one sheet.

    Step 0 (the shared observed initial state, where every method is exact)
    is excluded by default. ``clean`` must be aligned with the sheet's rows.
    Trajectories the method dropped are listed in the report meta.
    """
    truth = _truth(sheet, truth)
    sheet = sheet.subset_time(t_slice)
    truth = truth[:, t_slice]
    p_hat = observed_coverage(sheet, truth)
    ce, _ = calibration_error(sheet, truth)
    width, _ = pi_width(sheet)
    err, _ = mse(sheet.corrected, truth)
    err_clean = None if clean is None else mse(sheet.corrected, np.asarray(clean)[:, t_slice])[0]
    meta = {}
    dropped = getattr(sheet, "dropped", None)
    if dropped is not None and len(dropped):
        meta["dropped_trajectories"] = [int(i) for i in dropped]
    return CalibrationReport(sheet.method, np.asarray(sheet.levels), p_hat, ce, width, err,
                             err_clean, meta)
