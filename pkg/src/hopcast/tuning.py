"""Sequence-length tuning from calibration curves, ensemble-size sweeps and
the sine-wave attention-span demonstration."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corrector import (LEVELS, ContextPools, CorrectorConfig, attention_weights,
                        build_association_memory, errors_from_weights,
                        train_correction_model)
from .ensemble import ensemble_evaluate
from .metrics import evaluate_sheet

logger = logging.getLogger(__name__)

CALIBRATED = "calibrated"
OVERCONFIDENT = "overconfident"
UNDERCONFIDENT = "underconfident"


def classify_calibration(observed, expected=LEVELS, tol: float = 0.02) -> str:
    """Verdict from the mean signed gap between observed and nominal coverage."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    gap = float(np.mean(np.asarray(observed, dtype=float) - np.asarray(expected, dtype=float)))
    if gap < -tol:
        return OVERCONFIDENT
    if gap > tol:
        return UNDERCONFIDENT
    return CALIBRATED


def curve_ce(observed, expected=LEVELS) -> float:
    return float(np.sum((np.asarray(observed, dtype=float) - np.asarray(expected)) ** 2))


@dataclass
class TuningTrace:
    """Every trial of a tuning loop and the value finally chosen."""

    trials: list = field(default_factory=list)
    choice: Optional[int] = None
    cap: int = 0
    warning: Optional[str] = None

    def add(self, value: int, ce: float, verdict: str):
        self.trials.append({"value": int(value), "ce": float(ce), "verdict": verdict})

    def to_dict(self) -> dict:
        return {"trials": self.trials, "choice": self.choice, "cap": self.cap,
                "warning": self.warning}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def tune_sequence_length(evaluate: Callable[[int], Sequence[float]], lo: int, hi: int,
                         cap: int = 8, tol: float = 0.02):
    """Bisection on ``[lo, hi]`` driven by calibration verdicts.

    ``evaluate(seq_len)`` trains and evaluates a correction model and
    returns its observed coverage at the nine nominal levels. Overconfident
    curves move the search to the upper half, underconfident ones to the
    lower half. Stops on a calibrated verdict, when the bracket cannot shrink
    further, or after ``cap`` trials; returns the lowest-CE value seen.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    trace = TuningTrace(cap=cap)
    a, b = int(lo), int(hi)
    current = (a + b) // 2
    best_value, best_ce = current, np.inf
    seen = set()
    for _ in range(cap):
        observed = evaluate(current)
        ce = curve_ce(observed)
        verdict = classify_calibration(observed, tol=tol)
        trace.add(current, ce, verdict)
        seen.add(current)
        if ce < best_ce:
            best_value, best_ce = current, ce
        if verdict == CALIBRATED:
            break
        if verdict == OVERCONFIDENT:
            a = current
        else:
            b = current
        nxt = (a + b) // 2
        if nxt in seen:
            trace.warning = "search bracket exhausted"
            break
        current = nxt
    else:
        trace.warning = "iteration cap reached without a calibrated verdict"
    if trace.warning:
        logger.warning("sequence-length tuning: %s; using %d", trace.warning, best_value)
    trace.choice = int(best_value)
    return trace.choice, trace


def sweep_ensemble_size(population, sizes: Sequence[int], method: str, inference,
                        particles: Optional[int] = None, rng_seed=0) -> dict:
    """Calibration report for each ensemble size, reusing the population prefix."""
    if max(sizes) > len(population):
        raise ValueError(f"largest size {max(sizes)} exceeds population {len(population)}")
    out = {}
    for m in sizes:
        sheet = ensemble_evaluate(population, m, method, inference, particles, rng_seed)
        out[int(m)] = evaluate_sheet(sheet, clean=inference.select_ids(sheet.traj_ids).clean)
    return out


# --- sine demonstration ---------------------------------------------------

SINE_QUERY = 3.28
SINE_DOMAIN = ((-5 * np.pi / 2, -np.pi), (np.pi, 5 * np.pi / 2))


def sine_dataset(n_points: int = 6000, rng_seed=0):
    """Heteroscedastic sine data: x uniform on two symmetric intervals,
    ``y = sin(x) + N(0, (0.2 |sin(1.5 x + pi/8)|)^2)``."""
    rng = np.random.default_rng(rng_seed)
    (a0, a1), (b0, b1) = SINE_DOMAIN
    left = rng.random(n_points) < 0.5
    u = rng.random(n_points)
    x = np.where(left, a0 + (a1 - a0) * u, b0 + (b1 - b0) * u)
    y = np.sin(x) + rng.standard_normal(n_points) * 0.2 * np.abs(np.sin(1.5 * x + np.pi / 8))
    return x, y


@dataclass
class SpanResult:
    seq_len: int
    sampled_keys: np.ndarray
    bin_centers: np.ndarray
    frequency: np.ndarray
    model: object = field(default=None, repr=False)

    def mass_near(self, centre: float, radius: float = 0.5) -> float:
        return float(np.mean(np.abs(self.sampled_keys - centre) < radius))


def sine_attention_span_demo(seq_lens: Sequence[int] = (3, 8), rng_seed=0,
                             n_points: int = 6000, query: float = SINE_QUERY,
                             config: Optional[CorrectorConfig] = None,
                             bin_width: float = 0.25) -> dict:
    """Train one correction model per sequence length on ``x -> y`` triplets
    (queries and keys are ``x``, values are ``y``) and histogram the memory
    keys sampled for the query.

    The memory holds every data point.
    """
    base = config or CorrectorConfig(epochs=400, patience=50, triplets_per_batch=1,
                                     memory_size=n_points)
    x, y = sine_dataset(n_points, rng_seed)
    ctx = x[:, None]
    pools = ContextPools(ctx, ctx, y[:, None], np.stack([np.arange(n_points),
                                                         np.ones(n_points, int)], axis=1))
    lo, hi = SINE_DOMAIN[0][0], SINE_DOMAIN[1][1]
    edges = np.arange(lo, hi + bin_width, bin_width)
    results = {}
    for k, s_len in enumerate(seq_lens):
        cfg = CorrectorConfig(**{**base.__dict__, "seq_len": int(s_len)})
        seeds = np.random.SeedSequence([int(rng_seed), int(s_len)]).spawn(3)
        model = train_correction_model(pools, 0, cfg, seeds[0])
        memory = build_association_memory(model, pools, 0, min(cfg.memory_size, n_points),
                                          seeds[1])
        weights = attention_weights(model, memory, np.array([[query]]))[0]
        rows, _ = errors_from_weights(weights, memory.rows, cfg.n_samples, "Sample", seeds[2])
        keys = pools.keys[rows, 0]
        counts, _ = np.histogram(keys, bins=edges)
        results[int(s_len)] = SpanResult(int(s_len), keys, 0.5 * (edges[1:] + edges[:-1]),
                                         counts / counts.sum(), model)
    return results


def write_span_csv(results: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "frequency", "S_L"])
        for s_len, res in results.items():
            for c, f in zip(res.bin_centers, res.frequency):
                w.writerow([f"{c:.4f}", repr(float(f)), s_len])
