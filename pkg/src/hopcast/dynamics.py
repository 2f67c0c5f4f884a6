"""Benchmark ODE systems, adaptive Dormand-Prince integration and noisy
trajectory datasets.

Systems and their default parameters, initial-condition boxes and sampling
grids are registered in :data:`SYSTEMS`. Integration runs in the compiled
kernel when available (see :mod:`hopcast.kernels`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

RTOL = 1e-6
ATOL = 1e-8
MAX_SOLVER_STEPS = 1_000_000


class IntegrationError(RuntimeError):
    """Solver failed: step-size underflow, non-finite state or step budget."""

    def __init__(self, message: str, trajectory: Optional[int], t_reached: float):
        super().__init__(message)
        self.trajectory = trajectory
        self.t_reached = t_reached


class Role(str, Enum):
    INTEGRATED = "Integrated"
    AUTOREGRESSIVE = "Autoregressive"
    ERROR = "Error"


@dataclass(frozen=True)
class SystemInfo:
    kernel_id: Optional[int]
    dim: Optional[int]
    param_names: tuple
    params: tuple
    ic_ranges: tuple
    dt: float
    horizon: int
    n_trajectories: int
    derivatives_allowed: bool = False


# Parameter order is the kernel's positional order.
SYSTEMS: dict[str, SystemInfo] = {
    "LotkaVolterra": SystemInfo(
        0, 2, ("alpha", "beta", "gamma", "delta"), (1.1, 0.4, 0.4, 0.1),
        ((5.0, 20.0), (5.0, 10.0)), 0.1, 300, 500, derivatives_allowed=True),
    "Lorenz": SystemInfo(
        1, 3, ("sigma", "rho", "beta"), (10.0, 28.0, 8.0 / 3.0),
        ((-20.0, 20.0), (-20.0, 20.0), (0.0, 50.0)), 0.01, 300, 1000,
        derivatives_allowed=True),
    "FHN": SystemInfo(
        2, 2, ("a", "b", "eps", "I"), (0.7, 0.8, 0.08, 0.5),
        ((-1.5, 1.5), (-1.5, 1.5)), 0.5, 400, 350),
    "Lorenz95": SystemInfo(
        3, 5, ("F",), (8.0,), ((-10.5, 10.5),) * 5, 0.01, 300, 666),
    "Glycolytic": SystemInfo(
        4, 7,
        ("J0", "k1", "k2", "k3", "k4", "k5", "k6", "k", "kappa", "q", "K1", "psi", "N", "A"),
        (2.5, 100.0, 6.0, 16.0, 100.0, 1.28, 12.0, 1.8, 13.0, 4.0, 0.52, 0.1, 1.0, 4.0),
        ((0.15, 1.60), (0.19, 2.16), (0.04, 0.20), (0.10, 0.35), (0.08, 0.30),
         (0.14, 2.67), (0.05, 0.10)),
        0.01, 400, 750),
    "SineDemo": SystemInfo(
        None, 1, (), (), ((-5 * np.pi / 2, 5 * np.pi / 2),), 1.0, 2, 6000),
    # test-only linear system dx/dt = -rate * x, any dimension
    "ExponentialDecay": SystemInfo(5, None, ("rate",), (1.0,), ((1.0, 1.0),), 1.0, 2, 1),
}


@dataclass(frozen=True)
class SystemSpec:
    """One benchmark ODE system and its sampling configuration."""

    name: str
    dim: int
    params: Mapping[str, float]
    ic_ranges: tuple
    dt: float
    horizon: int
    n_trajectories: int
    noise_scale: float = 0.0
    model_derivatives: bool = False

    def __post_init__(self):
        if self.name not in SYSTEMS:
            raise ValueError(f"unknown system {self.name!r}")
        info = SYSTEMS[self.name]
        if info.dim is not None and self.dim != info.dim:
            raise ValueError(f"{self.name} has dimension {info.dim}, got {self.dim}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        object.__setattr__(self, "ic_ranges", tuple(tuple(map(float, r)) for r in self.ic_ranges))
        object.__setattr__(self, "params", dict(self.params))
        if len(self.ic_ranges) != self.dim:
            raise ValueError(f"expected {self.dim} IC ranges, got {len(self.ic_ranges)}")
        for lo, hi in self.ic_ranges:
            if not lo <= hi:
                raise ValueError(f"IC range ({lo}, {hi}) is inverted")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 2:
            raise ValueError("horizon T must be at least 2")
        if self.n_trajectories < 1:
            raise ValueError("need at least one trajectory")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.model_derivatives and not info.derivatives_allowed:
            raise ValueError(f"derivative channels are not modelled for {self.name}")
        missing = set(info.param_names) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters for {self.name}: {sorted(missing)}")

    @property
    def channels(self) -> int:
        return 2 * self.dim if self.model_derivatives else self.dim

    @property
    def kernel_params(self) -> np.ndarray:
        names = SYSTEMS[self.name].param_names
        return np.array([float(self.params[k]) for k in names], dtype=np.float64)

    def with_(self, **changes) -> "SystemSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "dim": self.dim, "params": dict(self.params),
            "ic_ranges": [list(r) for r in self.ic_ranges], "dt": self.dt,
            "horizon": self.horizon, "n_trajectories": self.n_trajectories,
            "noise_scale": self.noise_scale, "model_derivatives": self.model_derivatives,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemSpec":
        return cls(**{**d, "ic_ranges": tuple(tuple(r) for r in d["ic_ranges"])})


def system_spec(name: str, noise_scale: float = 0.0, model_derivatives: Optional[bool] = None,
                **overrides) -> SystemSpec:
    """Build a :class:`SystemSpec` from the registry defaults.

    Derivative channels default to on where they are modelled (LV, Lorenz).
    """
    info = SYSTEMS[name]
    if model_derivatives is None:
        model_derivatives = info.derivatives_allowed
    kwargs = dict(
        name=name, dim=info.dim if info.dim is not None else len(info.ic_ranges),
        params=dict(zip(info.param_names, info.params)), ic_ranges=info.ic_ranges,
        dt=info.dt, horizon=info.horizon, n_trajectories=info.n_trajectories,
        noise_scale=noise_scale, model_derivatives=model_derivatives,
    )
    if "params" in overrides:
        kwargs["params"] = {**kwargs["params"], **overrides.pop("params")}
    kwargs.update(overrides)
    return SystemSpec(**kwargs)


@dataclass
class TrajectorySet:
    """``N x T x C`` trajectories in one role (Integrated, Autoregressive, Error)."""

    role: Role
    data: np.ndarray
    initial_states: np.ndarray
    spec: SystemSpec
    seed: Optional[int] = None
    traj_ids: Optional[np.ndarray] = None
    clean: Optional[np.ndarray] = field(default=None, repr=False)
    dropped: Optional[np.ndarray] = None

    def __post_init__(self):
        self.role = Role(self.role)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("trajectory data must be N x T x C")
        if self.traj_ids is None:
            self.traj_ids = np.arange(self.data.shape[0])
        self.traj_ids = np.asarray(self.traj_ids, dtype=np.int64)

    @property
    def shape(self):
        return self.data.shape

    def select_ids(self, ids) -> "TrajectorySet":
        """Rows whose ``traj_ids`` are in ``ids``, in this set's order."""
        return self.subset(np.flatnonzero(np.isin(self.traj_ids, ids)))

    def subset(self, index) -> "TrajectorySet":
        index = np.asarray(index)
        return TrajectorySet(self.role, self.data[index], self.initial_states[index], self.spec,
                             self.seed, self.traj_ids[index],
                             None if self.clean is None else self.clean[index])


def _check_state(spec: SystemSpec, state) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)
    if x.shape[-1:] != (spec.dim,):
        raise ValueError(f"{spec.name} state must have length {spec.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite values")
    if SYSTEMS[spec.name].kernel_id is None:
        raise ValueError(f"{spec.name} has no vector field")
    return x


def eval_rhs(spec: SystemSpec, state: Sequence[float]) -> np.ndarray:
    """Vector field ``f(x)`` of the named system at one state, or row-wise over a batch."""
    x = _check_state(spec, state)
    batch = np.ascontiguousarray(np.atleast_2d(x))
    out = kernels.eval_rhs_batch(SYSTEMS[spec.name].kernel_id, spec.kernel_params, batch)
    return out[0] if x.ndim == 1 else out.reshape(x.shape)


def integrate_trajectory(spec: SystemSpec, x0: Sequence[float], *, rtol: float = RTOL,
                         atol: float = ATOL, max_step: float = np.inf,
                         trajectory: Optional[int] = None) -> np.ndarray:
    """Integrate from ``x0`` and sample every ``spec.dt`` for ``spec.horizon`` rows.

    With ``spec.model_derivatives`` each row is extended by the vector field at
    that state (``2D`` channels).
    """
    x0 = np.ascontiguousarray(_check_state(spec, x0))
    rows, status, t_reached = kernels.integrate_grid(
        SYSTEMS[spec.name].kernel_id, spec.kernel_params, x0, float(spec.dt),
        int(spec.horizon), float(rtol), float(atol), float(max_step), MAX_SOLVER_STEPS)
    if status != 0:
        reason = {1: "step size underflow", 2: "non-finite state",
                  3: "solver step budget exhausted"}[status]
        raise IntegrationError(
            f"{spec.name} trajectory {trajectory}: {reason} at t={t_reached:.6g}",
            trajectory, t_reached)
    if spec.model_derivatives:
        rows = np.concatenate([rows, eval_rhs(spec, rows)], axis=1)
    return rows


def sample_initial_conditions(spec: SystemSpec, rng_seed: int) -> np.ndarray:
    """Uniform draws from each coordinate's IC range, ``N x D``."""
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0]))
    lo, hi = np.array(spec.ic_ranges).T
    return lo + (hi - lo) * rng.random((spec.n_trajectories, spec.dim))


def generate_integrated_dataset(spec: SystemSpec, rng_seed: int) -> TrajectorySet:
    """Integrate ``N`` trajectories and add measurement noise.

    Channel ``c`` receives zero-mean Gaussian noise with standard deviation
    ``noise_scale * std_c``, with ``std_c`` pooled over every clean sample.
    The clean array is kept on ``.clean``.
    """
    x0s = sample_initial_conditions(spec, rng_seed)
    clean = np.stack([integrate_trajectory(spec, x0, trajectory=n) for n, x0 in enumerate(x0s)])
    noisy = clean.copy()
    if spec.noise_scale > 0:
        std_c = clean.reshape(-1, clean.shape[-1]).std(axis=0)
        children = np.random.SeedSequence([rng_seed, 1]).spawn(spec.n_trajectories)
        for n, child in enumerate(children):
            eps = np.random.default_rng(child).standard_normal(clean.shape[1:])
            noisy[n] += spec.noise_scale * std_c * eps
    return TrajectorySet(Role.INTEGRATED, noisy, noisy[:, 0].copy(), spec, seed=rng_seed,
                         clean=clean)


def fixed_points(spec: SystemSpec) -> list[np.ndarray]:
    """Analytically known equilibria of the named system (used as oracles)."""
    p = spec.params
    if spec.name == "LotkaVolterra":
        return [np.zeros(2), np.array([p["gamma"] / p["delta"], p["alpha"] / p["beta"]])]
    if spec.name == "Lorenz":
        r = np.sqrt(p["beta"] * (p["rho"] - 1))
        return [np.zeros(3), np.array([r, r, p["rho"] - 1]), np.array([-r, -r, p["rho"] - 1])]
    if spec.name == "Lorenz95":
        return [np.full(spec.dim, p["F"])]
    if spec.name == "ExponentialDecay":
        return [np.zeros(spec.dim)]
    return []
