"""Deterministic one-step predictor, autoregressive rollout and error sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import Role, SystemSpec, TrajectorySet
from .tensor_nn import (MlpParams, Standardizer, TrainResult, init_mlp, make_optimizer, seed_sequence,
                        mlp_forward, train_epochs)

logger = logging.getLogger(__name__)


class RolloutError(RuntimeError):
    """Autoregression produced a non-finite state."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    """Optimizer and stopping settings shared by every trained network."""

    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 20
    holdout_fraction: float = 0.1
    optimizer: str = "Adam"
    weight_decay: Optional[float] = None
    dtype: str = "float32"


def default_hidden(system_name: str) -> list:
    """Two 400-unit layers for LV and FHN, three for the other systems."""
    return [400, 400] if system_name in ("LotkaVolterra", "FHN") else [400, 400, 400]


def split_trajectories(n: int, train_fraction: float = 0.8, rng_seed=0):
    """Random trajectory-level split; returns sorted (train, test) index arrays."""
    if n < 2:
        raise ValueError("need at least two trajectories to split")
    perm = np.random.default_rng(rng_seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def transition_pairs(data: np.ndarray):
    """All ``(s_t, s_{t+1})`` pairs of an ``N x T x C`` array."""
    c = data.shape[-1]
    return data[:, :-1].reshape(-1, c), data[:, 1:].reshape(-1, c)


@dataclass
class PredictorModel:
    """One-step map ``s_t -> s_{t+1}`` on standardized channels."""

    params: MlpParams
    input_stats: Standardizer
    output_stats: Standardizer
    history: Optional[TrainResult] = field(default=None, repr=False)

    @property
    def channels(self) -> int:
        return self.params.layer_sizes[0]

    def predict(self, states: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        z = mlp_forward(self.params, self.input_stats.transform(x))
        return self.output_stats.inverse(z.astype(np.float64))


def train_predictor(integrated: TrajectorySet, hidden: Optional[Sequence[int]] = None,
                    hyper: Optional[TrainConfig] = None, rng_seed=0) -> PredictorModel:
    """MSE-train a one-step model on every transition of ``integrated``."""
    hyper = hyper or TrainConfig()
    if integrated.data.shape[1] < 2:
        raise ValueError("need at least two timesteps to form transitions")
    hidden = default_hidden(integrated.spec.name) if hidden is None else list(hidden)
    c = integrated.data.shape[-1]
    x, y = transition_pairs(integrated.data)
    in_stats, out_stats = Standardizer.fit(x), Standardizer.fit(y)
    seeds = seed_sequence(rng_seed).spawn(2)
    params = init_mlp([c, *hidden, c], seeds[0], dtype=hyper.dtype)
    opt = make_optimizer(params, hyper.optimizer, hyper.lr, hyper.weight_decay)
    result = train_epochs(params, opt, in_stats.transform(x), out_stats.transform(y), "mse",
                          hyper.batch_size, hyper.max_epochs, hyper.patience, seeds[1],
                          hyper.holdout_fraction)
    logger.info("predictor trained: %d epochs, best holdout %.4g at epoch %d",
                len(result.holdout_loss), min(result.holdout_loss, default=np.nan),
                result.best_epoch)
    return PredictorModel(result.params, in_stats, out_stats, result)


def rollout_batch(model, x0: np.ndarray, horizon: int) -> np.ndarray:
    """Roll ``model.predict`` forward from each row of ``x0``; ``N x T x C``.

    Rows of trajectories that become non-finite stay NaN from that step on.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    out = np.full((x0.shape[0], horizon, x0.shape[1]), np.nan)
    out[:, 0] = x0
    alive = np.all(np.isfinite(x0), axis=1)
    for t in range(1, horizon):
        if not alive.any():
            break
        nxt = model.predict(out[alive, t - 1])
        ok = np.all(np.isfinite(nxt), axis=1)
        rows = np.flatnonzero(alive)
        out[rows[ok], t] = nxt[ok]
        alive[rows[~ok]] = False
    return out


def rollout(model, x0: Sequence[float], horizon: int) -> np.ndarray:
    """Autoregressive ``T x C`` rollout; row 0 is ``x0``."""
    traj = rollout_batch(model, np.asarray(x0, dtype=np.float64)[None], horizon)[0]
    bad = ~np.all(np.isfinite(traj), axis=1)
    if bad.any():
        step = int(np.argmax(bad))
        raise RolloutError(f"rollout became non-finite at step {step}", step)
    return traj


def build_error_sets(integrated: TrajectorySet, model):
    """Roll out from every observed initial state and form ``I - A``.

    Trajectories whose rollout diverges are dropped from both returned sets;
    their ids are recorded on ``dropped``. ``traj_ids`` identifies the rows
    kept.
    """
    auto = rollout_batch(model, integrated.data[:, 0], integrated.data.shape[1])
    ok = np.all(np.isfinite(auto), axis=(1, 2))
    if not ok.all():
        logger.warning("dropping %d diverged rollouts: %s", int((~ok).sum()),
                       integrated.traj_ids[~ok].tolist())
    kept = integrated.subset(np.flatnonzero(ok))
    auto = auto[ok]
    a_set = TrajectorySet(Role.AUTOREGRESSIVE, auto, auto[:, 0].copy(), integrated.spec,
                          integrated.seed, kept.traj_ids)
    f_set = TrajectorySet(Role.ERROR, kept.data - auto, kept.data[:, 0].copy(),
                          integrated.spec, integrated.seed, kept.traj_ids)
    a_set.dropped = f_set.dropped = integrated.traj_ids[~ok]
    return a_set, f_set


class LinearMap:
    """``x -> x @ matrix.T + offset``; handy fixed predictor for tests and demos."""

    def __init__(self, matrix, offset=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.offset = np.zeros(self.matrix.shape[0]) if offset is None else np.asarray(offset)

    def predict(self, states):
        return np.atleast_2d(states) @ self.matrix.T + self.offset


class OracleMap:
    """Predictor that replays known trajectories exactly (perfect-model limit)."""

    def __init__(self, spec: SystemSpec):
        from .dynamics import integrate_trajectory
        self._step = spec.with_(horizon=2)
        self._integrate = integrate_trajectory

    def predict(self, states):
        return np.stack([self._integrate(self._step, s[: self._step.dim])[1] for s in
                         np.atleast_2d(states)])
