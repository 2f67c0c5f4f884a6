"""Probabilistic-ensemble baselines: Gaussian-output networks trained with
negative log-likelihood, particle propagation (Expectation, Trajectory
Sampling, Moment Matching) and Gaussian prediction intervals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .corrector import LEVELS, IntervalSheet
from .dynamics import TrajectorySet
from .predictor import TrainConfig, default_hidden, transition_pairs
from .tensor_nn import (LOG_VAR_MAX, LOG_VAR_MIN, MlpParams, Standardizer, init_mlp,
                        make_optimizer, mlp_forward, seed_sequence, train_epochs)

logger = logging.getLogger(__name__)

METHODS = ("expectation", "trajectory_sampling", "moment_matching")
DEFAULT_PARTICLES = {"expectation": 1, "trajectory_sampling": 20, "moment_matching": 20}


@dataclass
class ProbabilisticModel:
    """Network with ``2C`` outputs read as (mean, log-variance) per channel."""

    params: MlpParams
    input_stats: Standardizer
    output_stats: Standardizer

    def predict(self, states: np.ndarray):
        """Mean and (strictly positive) variance of the next state, original units."""
        x = np.atleast_2d(np.asarray(states, dtype=np.float64))
        out = mlp_forward(self.params, self.input_stats.transform(x)).astype(np.float64)
        c = out.shape[1] // 2
        log_var = np.clip(out[:, c:], LOG_VAR_MIN, LOG_VAR_MAX)
        mean = self.output_stats.inverse(out[:, :c])
        return mean, np.exp(log_var) * self.output_stats.std ** 2


@dataclass
class EnsemblePopulation:
    """Independently seeded members; an ensemble of size M is the first M."""

    members: list
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    def first(self, m: int) -> list:
        if not 1 <= m <= len(self.members):
            raise ValueError(f"ensemble size {m} outside 1..{len(self.members)}")
        return self.members[:m]


def train_member(integrated: TrajectorySet, hidden, hyper: TrainConfig, seed) -> ProbabilisticModel:
    c = integrated.data.shape[-1]
    x, y = transition_pairs(integrated.data)
    in_stats, out_stats = Standardizer.fit(x), Standardizer.fit(y)
    init_seed, train_seed = seed_sequence(seed).spawn(2)
    params = init_mlp([c, *hidden, 2 * c], init_seed, dtype=hyper.dtype)
    opt = make_optimizer(params, hyper.optimizer, hyper.lr, hyper.weight_decay)
    result = train_epochs(params, opt, in_stats.transform(x), out_stats.transform(y),
                          "gaussian_nll", hyper.batch_size, hyper.max_epochs, hyper.patience,
                          train_seed, hyper.holdout_fraction)
    logger.info("ensemble member trained: %d epochs, best holdout NLL %.4g",
                len(result.holdout_loss), min(result.holdout_loss, default=np.nan))
    return ProbabilisticModel(result.params, in_stats, out_stats)


def train_population(integrated: TrajectorySet, hidden: Optional[Sequence[int]] = None,
                     hyper: Optional[TrainConfig] = None, population_size: int = 15,
                     rng_seed=0) -> EnsemblePopulation:
    """Train ``population_size`` NLL models, each from its own derived seed.

    Member ``i`` depends only on ``(rng_seed, i)``, so a smaller population is
    an exact prefix of a larger one.
    """
    hyper = hyper or TrainConfig()
    hidden = default_hidden(integrated.spec.name) if hidden is None else list(hidden)
    seeds = seed_sequence(rng_seed).spawn(population_size)
    members = [train_member(integrated, hidden, hyper, s) for s in seeds]
    return EnsemblePopulation(members, seeds)


# --- propagation ----------------------------------------------------------

@dataclass
class ParticleCloud:
    """Particle states and their predicted variances, ``T x K x C`` (K = P*M).

    ``truncated_at`` is the step at which propagation became non-finite; the
    arrays then hold only the steps before it.
    """

    states: np.ndarray
    variances: np.ndarray
    n_models: int
    n_particles: int
    truncated_at: Optional[int] = None

    @property
    def size(self) -> int:
        return self.states.shape[1]


def fit_moments(states: np.ndarray):
    """Mean and population (1/K) diagonal variance over the particle axis (-2)."""
    mu = states.mean(axis=-2, keepdims=True)
    var = np.mean((states - mu) ** 2, axis=-2)
    return mu[..., 0, :], var


def _propagate(models, x0, horizon, particles, mode, rng_seeds):
    """Shared loop over ``N`` initial states; returns ``N`` clouds.

    A trajectory whose predictions become non-finite stops there; the others
    continue unaffected because every trajectory has its own random stream.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, c = x0.shape
    m = len(models)
    k = m * particles
    states = np.full((n, horizon, k, c), np.nan)
    variances = np.full_like(states, np.nan)
    states[:, 0] = x0[:, None, :]
    variances[:, 0] = 0.0
    rngs = [np.random.default_rng(s) for s in rng_seeds] if mode != "expectation" else None
    stop = np.full(n, horizon)
    alive = np.arange(n)
    cur = states[:, 0].reshape(n, m, particles, c).copy()
    for t in range(1, horizon):
        na = len(alive)
        mean = np.empty((na, m, particles, c))
        var = np.empty_like(mean)
        for j, model in enumerate(models):
            mu_j, var_j = model.predict(cur[alive, j].reshape(-1, c))
            mean[:, j] = mu_j.reshape(na, particles, c)
            var[:, j] = var_j.reshape(na, particles, c)
        ok = np.all(np.isfinite(mean) & np.isfinite(var), axis=(1, 2, 3))
        if not ok.all():
            for i in alive[~ok]:
                logger.warning("%s propagation from initial state %d became non-finite at "
                               "step %d; truncated", mode, i, t)
                stop[i] = t
            alive, mean, var = alive[ok], mean[ok], var[ok]
            if len(alive) == 0:
                break
        if mode == "expectation":
            nxt = mean
        else:
            eps = np.stack([rngs[i].standard_normal((m, particles, c)) for i in alive])
            nxt = mean + np.sqrt(var) * eps
            if mode == "moment_matching":
                mu, sig2 = fit_moments(nxt.reshape(len(alive), k, c))
                eps2 = np.stack([rngs[i].standard_normal((k, c)) for i in alive])
                nxt = (mu[:, None, :] + np.sqrt(sig2)[:, None, :] * eps2).reshape(nxt.shape)
        states[alive, t] = nxt.reshape(len(alive), k, c)
        variances[alive, t] = var.reshape(len(alive), k, c)
        cur[alive] = nxt
    return [ParticleCloud(states[i, :stop[i]], variances[i, :stop[i]], m, particles,
                          None if stop[i] == horizon else int(stop[i])) for i in range(n)]


def _stream_seeds(rng, n):
    if isinstance(rng, (list, tuple)):
        return list(rng)
    return seed_sequence(rng if rng is not None else 0).spawn(n)


def propagate_expectation(models, x0, horizon: int):
    """Each model propagates its own predicted mean (one particle per model).
    Returns one :class:`ParticleCloud` per initial state when ``x0`` is 2-D."""
    clouds = _propagate(models, x0, horizon, 1, "expectation", None)
    return clouds if np.ndim(x0) == 2 else clouds[0]


def propagate_trajectory_sampling(models, x0, horizon: int, particles: int = 20, rng=0):
    """Each particle samples its next state from its model's diagonal Gaussian."""
    if particles < 1:
        raise ValueError("need at least one particle")
    n = np.atleast_2d(x0).shape[0]
    clouds = _propagate(models, x0, horizon, particles, "trajectory_sampling",
                        _stream_seeds(rng, n))
    return clouds if np.ndim(x0) == 2 else clouds[0]


def propagate_moment_matching(models, x0, horizon: int, particles: int = 20, rng=0):
    """Sample every particle, fit one diagonal Gaussian, resample all inputs."""
    if particles < 1:
        raise ValueError("need at least one particle")
    n = np.atleast_2d(x0).shape[0]
    clouds = _propagate(models, x0, horizon, particles, "moment_matching",
                        _stream_seeds(rng, n))
    return clouds if np.ndim(x0) == 2 else clouds[0]


def mvn_net_intervals(states: np.ndarray, variances: np.ndarray, levels=LEVELS):
    """Gaussian intervals from a particle cloud (particle axis -2).

    ``mu = mean(s)``; ``var = mean(variance + (s - mu)^2)``; the level-z bounds
    are ``mu -/+ ppf(1 - alpha) * sqrt(var)`` with ``alpha = (1 - z) / 2``.
    Returns ``(mu, var, lower, upper)`` with the level axis last.
    """
    states = np.asarray(states, dtype=float)
    if states.shape[-2] == 0:
        raise ValueError("empty particle cloud")
    mu = states.mean(axis=-2)
    var = np.mean(variances + (states - mu[..., None, :]) ** 2, axis=-2)
    alpha = (1.0 - np.asarray(levels, dtype=float)) / 2.0
    half = norm.ppf(1.0 - alpha) * np.sqrt(var)[..., None]
    return mu, var, mu[..., None] - half, mu[..., None] + half


def ensemble_evaluate(population: EnsemblePopulation, n_models: int, method: str,
                      inference: TrajectorySet, particles: Optional[int] = None,
                      rng_seed=0, levels=LEVELS) -> IntervalSheet:
    """Propagate from every observed initial state and build interval sheets.

    Trajectories whose propagation diverges are left out of the sheet and
    listed on ``sheet.dropped``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown propagation method {method!r}")
    particles = DEFAULT_PARTICLES[method] if particles is None else particles
    if method == "expectation" and particles != 1:
        raise ValueError("Expectation uses exactly one particle per model")
    models = population.first(n_models)
    data = inference.data
    seeds = [np.random.SeedSequence([int(rng_seed), int(i)]) for i in inference.traj_ids]
    if method == "expectation":
        clouds = propagate_expectation(models, data[:, 0], data.shape[1])
    elif method == "trajectory_sampling":
        clouds = propagate_trajectory_sampling(models, data[:, 0], data.shape[1], particles,
                                               seeds)
    else:
        clouds = propagate_moment_matching(models, data[:, 0], data.shape[1], particles, seeds)
    kept = np.array([cl.truncated_at is None for cl in clouds])
    if not kept.any():
        raise FloatingPointError(f"{method} propagation diverged on every trajectory")
    if not kept.all():
        logger.warning("%s: %d of %d trajectories diverged and are left out of evaluation",
                       method, int((~kept).sum()), len(clouds))
    states = np.stack([cl.states for cl, k in zip(clouds, kept) if k])
    variances = np.stack([cl.variances for cl, k in zip(clouds, kept) if k])
    mu, _, lower, upper = mvn_net_intervals(states, variances, levels)
    return IntervalSheet(method, inference.traj_ids[kept], mu, mu.copy(), lower, upper,
                         data[kept], np.asarray(levels, dtype=float),
                         inference.traj_ids[~kept])
