"""End-to-end experiment runner and cross-run comparison table."""
from __future__ import annotations

import csv
import json
import logging
import platform
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig
from .corrector import (HopcastCorrector, build_association_memory, build_context_sets,
                        channel_intervals, hopcast_evaluate, train_correction_model)
from .dynamics import generate_integrated_dataset
from .ensemble import ensemble_evaluate, train_population
from .io import save_trajectories
from .kernels import BACKEND_NAME
from .metrics import evaluate_sheet
from .predictor import (build_error_sets, rollout_batch, split_trajectories, train_predictor)
from .tensor_nn import save_checkpoint
from .tuning import tune_sequence_length

logger = logging.getLogger(__name__)

# Fixed sub-stream labels so every stage draws from its own seed.
_SPLIT, _PREDICTOR, _VALIDATION, _POOLS, _CORRECTOR, _POPULATION = range(2, 8)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it, outputs so far are kept."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _sub(seed: int, label: int, *more) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), label, *map(int, more)])


@dataclass
class _Stages:
    """Runs named stages, records completion and wraps failures."""

    completed: list = field(default_factory=list)

    def run(self, name, fn, *args, **kwargs):
        logger.info("stage %s", name)
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - every failure is reported by stage
            raise StageError(name, exc) from exc
        logger.info("stage %s done in %.1fs", name, time.perf_counter() - start)
        self.completed.append(name)
        return out


def _coverage_on(model, memory, raw, truth, channel, n_samples, mode):
    """Observed coverage of one channel's intervals on held-out rollouts (t >= 1)."""
    ok = np.all(np.isfinite(raw), axis=(1, 2))
    raw, truth = raw[ok], truth[ok]
    _, lo, hi = channel_intervals(model, memory, raw, np.arange(len(raw)), n_samples, mode, 0)
    err = (truth[:, 1:, channel] - raw[:, 1:, channel])[..., None]
    inside = (lo[:, 1:] <= err) & (err <= hi[:, 1:])
    return inside.reshape(-1, inside.shape[-1]).mean(axis=0)


def _tuned_corrector(cfg: ExperimentConfig, seed: int, pools, predictor, validation):
    """Per-channel bisection over sequence length scored on validation rollouts.

    The model trained during the chosen trial is kept, not retrained.
    """
    tune = cfg.hopcast.tune
    raw = rollout_batch(predictor, validation.data[:, 0], validation.data.shape[1])
    models, memories, traces = [], [], []
    for ch in range(validation.data.shape[2]):
        cache = {}

        def evaluate(seq_len, ch=ch, cache=cache):
            ccfg = cfg.hopcast.corrector_config(ch, seq_len)
            model = train_correction_model(pools, ch, ccfg, _sub(seed, _CORRECTOR, ch, seq_len))
            memory = build_association_memory(model, pools, ch, min(ccfg.memory_size, len(pools)),
                                              _sub(seed, _CORRECTOR, ch, seq_len, 1))
            cache[seq_len] = (model, memory)
            return _coverage_on(model, memory, raw, validation.data, ch, ccfg.n_samples,
                                ccfg.retrieval)

        choice, trace = tune_sequence_length(evaluate, tune.lo, tune.hi, tune.cap, tune.tol)
        models.append(cache[choice][0])
        memories.append(cache[choice][1])
        traces.append(trace.to_dict())
    return HopcastCorrector(models, memories), traces


def _run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    stages = _Stages()
    out.mkdir(parents=True, exist_ok=True)
    (out / "datasets").mkdir(exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "sheets").mkdir(exist_ok=True)
    spec = cfg.system_spec()
    manifest = {"name": cfg.name, "system": spec.name, "sigma": spec.noise_scale,
                "seed": seed, "scale": cfg.scale, "config_sha256": cfg.digest(),
                "config": cfg.to_dict(), "versions": {
                    "hopcast": __version__, "numpy": np.__version__,
                    "scipy": scipy.__version__, "python": platform.python_version()},
                "backend": BACKEND_NAME, "stages": stages.completed}

    def write_manifest():
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                      default=str))

    write_manifest()
    try:
        integrated = stages.run("generate", generate_integrated_dataset, spec, seed)
        save_trajectories(integrated, out / "datasets" / "integrated.npz")

        def split():
            tr, te = split_trajectories(spec.n_trajectories, cfg.train_fraction,
                                        _sub(seed, _SPLIT))
            return integrated.subset(tr), integrated.subset(te)

        train_set, test_set = stages.run("split", split)
        manifest["test_ids"] = test_set.traj_ids.tolist()
        reports = {}

        if "hopcast" in cfg.methods:
            predictor = stages.run("predictor", train_predictor, train_set, cfg.predictor.hidden,
                                   cfg.predictor.train, _sub(seed, _PREDICTOR))
            save_checkpoint(out / "checkpoints" / "predictor.json", predictor.params,
                            input_stats=predictor.input_stats,
                            output_stats=predictor.output_stats)
            tuned = cfg.hopcast.tune.active(cfg.scale)

            def errors():
                fit_set, val_set = train_set, None
                if tuned:
                    fit_i, val_i = split_trajectories(
                        len(train_set.traj_ids), 1.0 - cfg.hopcast.tune.validation_fraction,
                        _sub(seed, _VALIDATION))
                    fit_set, val_set = train_set.subset(fit_i), train_set.subset(val_i)
                auto, err = build_error_sets(fit_set, predictor)
                save_trajectories(auto, out / "datasets" / "autoregressive.npz")
                save_trajectories(err, out / "datasets" / "errors.npz")
                pools = build_context_sets(fit_set.select_ids(auto.traj_ids), auto, _sub(seed, _POOLS),
                                           cfg.hopcast.include_initial, cfg.hopcast.shuffle)
                return pools, val_set

            pools, val_set = stages.run("errors", errors)

            def correctors():
                if tuned:
                    return _tuned_corrector(cfg, seed, pools, predictor, val_set)
                configs = [cfg.hopcast.corrector_config(ch) for ch in range(spec.channels)]
                return HopcastCorrector.fit(pools, configs, _sub(seed, _CORRECTOR)), None

            corrector, traces = stages.run("correctors", correctors)
            corrector.save(out / "checkpoints" / "corrector")
            manifest["seq_len"] = [m.config.seq_len for m in corrector.models]
            if traces is not None:
                manifest["tuning"] = traces
            sheet = stages.run("evaluate_hopcast", hopcast_evaluate, predictor, corrector.models,
                               corrector.memories, test_set, cfg.hopcast.n_samples,
                               cfg.hopcast.retrieval, seed)
            sheet.to_csv(out / "sheets" / "hopcast.csv")
            reports["hopcast"] = evaluate_sheet(sheet, clean=test_set.select_ids(sheet.traj_ids).clean)

        ens_methods = [m for m in cfg.methods if m != "hopcast"]
        if ens_methods:
            size = max(cfg.ensemble.members[m] for m in ens_methods)
            population = stages.run("population", train_population, train_set,
                                    cfg.ensemble.hidden, cfg.ensemble.train, size,
                                    _sub(seed, _POPULATION))
            for i, member in enumerate(population.members):
                save_checkpoint(out / "checkpoints" / f"member_{i}.json", member.params,
                                input_stats=member.input_stats, output_stats=member.output_stats)
            for m in ens_methods:
                sheet = stages.run(f"evaluate_{m}", ensemble_evaluate, population,
                                   cfg.ensemble.members[m], m, test_set,
                                   cfg.ensemble.particles.get(m), seed)
                sheet.to_csv(out / "sheets" / f"{m}.csv")
                reports[m] = evaluate_sheet(sheet, clean=test_set.select_ids(sheet.traj_ids).clean)

        def metrics():
            body = {"name": cfg.name, "system": spec.name, "sigma": spec.noise_scale,
                    "seed": seed, "scale": cfg.scale, "config_sha256": cfg.digest(),
                    "methods": {}}
            for m, rep in reports.items():
                rep.meta.update({"n_models": cfg.ensemble.members.get(m)} if m != "hopcast"
                                else {"seq_len": manifest["seq_len"]})
                body["methods"][m] = rep.to_dict()
                rep.curve_csv(out / f"calibration_{m}.csv")
            (out / "metrics.json").write_text(json.dumps(body, indent=2, sort_keys=True))
            return body

        body = stages.run("metrics", metrics)
    finally:
        write_manifest()
    return body


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   seeds: Optional[Sequence[int]] = None) -> list:
    """Run every configured seed; each writes a bundle under ``out_dir/seed_<s>``.

    Returns the bundle directories. Raises :class:`StageError` on the first
    failing stage, leaving that bundle's partial outputs on disk.
    """
    root = Path(out_dir if out_dir is not None else cfg.output_dir)
    bundles = []
    for seed in (cfg.seeds if seeds is None else seeds):
        bundle = root / f"seed_{int(seed)}"
        _run_seed(cfg, int(seed), bundle)
        bundles.append(bundle)
    return bundles


# --- comparison table -----------------------------------------------------

def _find_bundles(paths) -> tuple:
    found, missing = [], []
    for p in map(Path, paths):
        if (p / "metrics.json").is_file():
            found.append(p)
        elif p.is_dir() and list(p.glob("*/metrics.json")):
            found.extend(sorted(q.parent for q in p.glob("*/metrics.json")))
        else:
            missing.append(str(p))
    return found, missing


def _within(values: list, tol: float) -> list:
    best = min(values)
    return [v <= best * (1.0 + tol) for v in values]


def compare(paths, out_csv=None, tol: float = 0.05) -> list:
    """Aggregate bundles into one row per (system, sigma, method).

    Cells hold the mean and, with more than one run, the sample std. Within a
    (system, sigma) group, CE values within ``tol`` of the best are flagged;
    if several tie, the lowest-CE method gets an asterisk and the narrowest
    interval among the tied methods is flagged. MSE within ``tol`` of the
    best is flagged independently.
    """
    bundles, missing = _find_bundles(paths)
    if missing:
        raise FileNotFoundError(f"missing result bundles: {', '.join(missing)}")
    if not bundles:
        raise FileNotFoundError("no result bundles given")
    runs = defaultdict(list)
    for b in bundles:
        body = json.loads((b / "metrics.json").read_text())
        for m, rep in body["methods"].items():
            runs[(body["system"], float(body["sigma"]), m)].append(rep)
    rows = []
    for (system, sigma, method), reps in sorted(runs.items()):
        row = {"system": system, "sigma": sigma, "method": method, "n_runs": len(reps)}
        for key in ("mse", "pi_width", "ce"):
            vals = np.array([r[key] for r in reps], dtype=float)
            row[key] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else None
        rows.append(row)
    groups = defaultdict(list)
    for row in rows:
        groups[(row["system"], row["sigma"])].append(row)
    for grp in groups.values():
        ce_hl = _within([r["ce"] for r in grp], tol)
        mse_hl = _within([r["mse"] for r in grp], tol)
        tied = [r for r, h in zip(grp, ce_hl) if h]
        best = min(grp, key=lambda r: r["ce"])
        narrow = min(tied, key=lambda r: r["pi_width"]) if len(tied) > 1 else None
        for r, c_h, m_h in zip(grp, ce_hl, mse_hl):
            r["ce_highlight"] = c_h
            r["mse_highlight"] = m_h
            r["ce_star"] = narrow is not None and r is best
            r["pi_width_highlight"] = narrow is not None and r is narrow
    for r in rows:
        for key in ("mse", "pi_width", "ce"):
            cell = f"{r[key]:.4g}" if r[f"{key}_std"] is None else \
                f"{r[key]:.4g} ± {r[f'{key}_std']:.2g}"
            hl = r.get(f"{key}_highlight", False)
            cell = f"**{cell}**" if hl else cell
            if key == "ce" and r["ce_star"]:
                cell += "*"
            r[f"{key}_cell"] = cell
    if out_csv is not None:
        cols = ["system", "sigma", "method", "n_runs", "mse", "mse_std", "pi_width",
                "pi_width_std", "ce", "ce_std", "mse_highlight", "pi_width_highlight",
                "ce_highlight", "ce_star", "mse_cell", "pi_width_cell", "ce_cell"]
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in cols})
    return rows


# --- standalone tuning and diagnostics -------------------------------------

def _prepared(cfg: ExperimentConfig, seed: int):
    spec = cfg.system_spec()
    integrated = generate_integrated_dataset(spec, seed)
    tr, te = split_trajectories(spec.n_trajectories, cfg.train_fraction, _sub(seed, _SPLIT))
    return integrated.subset(tr), integrated.subset(te)


def tune_sl(cfg: ExperimentConfig, seed: int, out_dir) -> list:
    """Tune every channel's sequence length on a validation split and write
    ``tuning_trace_<channel>.json``; returns the chosen lengths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = _Stages()
    train_set, _ = stages.run("generate", _prepared, cfg, seed)
    predictor = stages.run("predictor", train_predictor, train_set, cfg.predictor.hidden,
                           cfg.predictor.train, _sub(seed, _PREDICTOR))

    def errors():
        fit_i, val_i = split_trajectories(len(train_set.traj_ids),
                                          1.0 - cfg.hopcast.tune.validation_fraction,
                                          _sub(seed, _VALIDATION))
        fit_set, val_set = train_set.subset(fit_i), train_set.subset(val_i)
        auto, _ = build_error_sets(fit_set, predictor)
        return build_context_sets(fit_set.select_ids(auto.traj_ids), auto, _sub(seed, _POOLS),
                                  cfg.hopcast.include_initial, cfg.hopcast.shuffle), val_set

    pools, val_set = stages.run("errors", errors)
    corrector, traces = stages.run("tuning", _tuned_corrector, cfg, seed, pools, predictor,
                                   val_set)
    for ch, trace in enumerate(traces):
        (out / f"tuning_trace_{ch}.json").write_text(json.dumps(trace, indent=2))
    return [m.config.seq_len for m in corrector.models]


def tune_ensemble(cfg: ExperimentConfig, seed: int, sizes: Sequence[int], method: str,
                  out_dir) -> dict:
    """Calibration metrics for ensembles of each size (one shared population);
    writes ``ensemble_sweep_<method>.json``."""
    from .tuning import sweep_ensemble_size

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = _Stages()
    train_set, test_set = stages.run("generate", _prepared, cfg, seed)
    population = stages.run("population", train_population, train_set, cfg.ensemble.hidden,
                            cfg.ensemble.train, max(sizes), _sub(seed, _POPULATION))
    reports = stages.run("sweep", sweep_ensemble_size, population, sizes, method, test_set,
                         cfg.ensemble.particles.get(method), seed)
    body = {str(m): rep.to_dict() for m, rep in reports.items()}
    (out / f"ensemble_sweep_{method}.json").write_text(json.dumps(body, indent=2,
                                                                  sort_keys=True))
    return reports


def gradient_checks(rng_seed: int = 0) -> dict:
    """Worst relative error of analytic vs central-difference gradients for the
    regression loss, the Gaussian NLL and the masked retrieval loss."""
    from .corrector import encoder_loss_and_grad
    from .tensor_nn import finite_diff_gradcheck, init_mlp, loss_and_grad

    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((16, 3))
    y = rng.standard_normal((16, 2))
    out = {}
    for name, widths, kind in (("mlp_mse", [3, 8, 2], "mse"),
                               ("mlp_gaussian_nll", [3, 8, 4], "gaussian_nll")):
        params = init_mlp(widths, rng_seed, dtype="float64")
        out[name] = finite_diff_gradcheck(
            params, lambda p, kind=kind: loss_and_grad(p, x, y, kind), rng_seed=rng_seed)
    q = rng.standard_normal((2, 6, 5))
    k = rng.standard_normal((2, 6, 5))
    v = rng.standard_normal((2, 6))
    enc = init_mlp([5, 8, 4], rng_seed, dtype="float64")
    out["attention_retrieval"] = finite_diff_gradcheck(
        enc, lambda p: encoder_loss_and_grad(p, q, k, v), rng_seed=rng_seed)
    return {k: float(v) for k, v in out.items()}
