"""Experiment configuration: YAML ingestion, validation and scale presets."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .corrector import CorrectorConfig
from .dynamics import SYSTEMS, SystemSpec, system_spec
from .ensemble import DEFAULT_PARTICLES, METHODS
from .predictor import TrainConfig

ALL_METHODS = ("hopcast",) + METHODS
DESK_FRACTION = 5


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class TuneConfig:
    """Per-channel sequence-length tuning on a validation split.

    ``enabled`` is ``True``, ``False`` or ``"desk"`` (tune only at desk scale,
    where fixed full-scale sequence lengths do not transfer).
    """

    enabled: object = False
    lo: int = 10
    hi: int = 1000
    cap: int = 6
    tol: float = 0.02
    validation_fraction: float = 0.2

    def active(self, scale: str) -> bool:
        if self.enabled == "desk":
            return scale == "desk"
        return bool(self.enabled)


@dataclass
class HopcastSection:
    seq_len: list = field(default_factory=list)
    embed_dim: int = 4
    hidden: list = field(default_factory=lambda: [100])
    use_encoder: bool = True
    include_initial: bool = True
    shuffle: bool = True
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 150
    triplets_per_batch: int = 1
    patience: int = 20
    memory_size: int = 2000
    n_samples: int = 1000
    retrieval: str = "Sample"
    tune: TuneConfig = field(default_factory=TuneConfig)

    def corrector_config(self, channel: int, seq_len: Optional[int] = None) -> CorrectorConfig:
        return CorrectorConfig(
            seq_len=int(seq_len if seq_len is not None else self.seq_len[channel]),
            embed_dim=self.embed_dim, hidden=tuple(self.hidden), use_encoder=self.use_encoder,
            include_initial=self.include_initial, shuffle=self.shuffle, lr=self.lr,
            weight_decay=self.weight_decay, epochs=self.epochs,
            triplets_per_batch=self.triplets_per_batch, patience=self.patience,
            memory_size=self.memory_size, n_samples=self.n_samples, retrieval=self.retrieval)


@dataclass
class EnsembleSection:
    hidden: Optional[list] = None
    population_size: int = 15
    members: dict = field(default_factory=lambda: {"expectation": 5, "moment_matching": 5,
                                                    "trajectory_sampling": 3})
    particles: dict = field(default_factory=lambda: dict(DEFAULT_PARTICLES))
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class PredictorSection:
    hidden: Optional[list] = None
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment cell."""

    name: str
    system: str
    noise_scale: float
    seeds: list
    methods: list = field(default_factory=lambda: ["hopcast"])
    scale: str = "full"
    n_trajectories: Optional[int] = None
    horizon: Optional[int] = None
    dt: Optional[float] = None
    params: dict = field(default_factory=dict)
    model_derivatives: Optional[bool] = None
    train_fraction: float = 0.8
    predictor: PredictorSection = field(default_factory=PredictorSection)
    hopcast: HopcastSection = field(default_factory=HopcastSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    reference: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def system_spec(self) -> SystemSpec:
        overrides = {k: getattr(self, k) for k in ("n_trajectories", "horizon", "dt")
                     if getattr(self, k) is not None}
        if self.params:
            overrides["params"] = dict(self.params)
        return system_spec(self.system, self.noise_scale, self.model_derivatives, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "predictor": PredictorSection, "hopcast": HopcastSection, "ensemble": EnsembleSection,
    "train": TrainConfig, "tune": TuneConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS and isinstance(value, dict):
            value = _build(_SECTIONS[key], value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.system not in SYSTEMS or cfg.system in ("SineDemo", "ExponentialDecay"):
        raise ConfigError(f"unknown experiment system {cfg.system!r}")
    if isinstance(cfg.methods, str):
        cfg.methods = [cfg.methods]
    bad = [m for m in cfg.methods if m not in ALL_METHODS]
    if bad or not cfg.methods:
        raise ConfigError(f"methods must be drawn from {ALL_METHODS}, got {cfg.methods}")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of explicit integers")
    if cfg.scale not in ("desk", "full"):
        raise ConfigError("scale must be 'desk' or 'full'")
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")
    try:
        spec = cfg.system_spec()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if "hopcast" in cfg.methods:
        hc = cfg.hopcast
        if hc.tune.enabled not in (True, False, "desk"):
            raise ConfigError("hopcast.tune.enabled must be true, false or 'desk'")
        if not 0 < hc.tune.validation_fraction < 1:
            raise ConfigError("hopcast.tune.validation_fraction must lie in (0, 1)")
        if not hc.tune.active(cfg.scale) and len(hc.seq_len) != spec.channels:
            raise ConfigError(f"hopcast.seq_len needs {spec.channels} entries (one per "
                              f"channel), got {len(hc.seq_len)}")
        if any(int(s) < 2 for s in hc.seq_len):
            raise ConfigError("sequence lengths must be at least 2")
        if hc.retrieval not in ("Sample", "TopK"):
            raise ConfigError("hopcast.retrieval must be Sample or TopK")
        if hc.tune.active(cfg.scale) and not 2 <= hc.tune.lo < hc.tune.hi:
            raise ConfigError("hopcast.tune needs 2 <= lo < hi")
    ens = [m for m in cfg.methods if m != "hopcast"]
    for m in ens:
        if m not in cfg.ensemble.members:
            raise ConfigError(f"ensemble.members has no size for {m}")
        size = cfg.ensemble.members[m]
        if not 1 <= size <= cfg.ensemble.population_size:
            raise ConfigError(f"ensemble size for {m} must lie in 1..population_size")
        if m == "expectation" and cfg.ensemble.particles.get(m, 1) != 1:
            raise ConfigError("expectation uses exactly one particle per model")


def apply_scale(cfg: ExperimentConfig, scale: str) -> ExperimentConfig:
    """Desk scale divides N and every epoch budget by five and trains only the
    population members the configured ensembles use."""
    cfg = copy.deepcopy(cfg)
    if scale == cfg.scale or scale is None:
        return cfg
    if scale == "full":
        raise ConfigError("cannot scale a desk configuration up; load the full preset")
    spec = cfg.system_spec()
    cfg.n_trajectories = max(spec.n_trajectories // DESK_FRACTION, 10)
    for train in (cfg.predictor.train, cfg.ensemble.train):
        train.max_epochs = max(train.max_epochs // DESK_FRACTION, 1)
    cfg.hopcast.epochs = max(cfg.hopcast.epochs // DESK_FRACTION, 1)
    used = [cfg.ensemble.members[m] for m in cfg.methods if m != "hopcast"]
    if used:
        cfg.ensemble.population_size = max(used)
    cfg.scale = "desk"
    return cfg


def config_from_dict(data: dict, scale: Optional[str] = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, dict(data), "config")
    _validate(cfg)
    if scale is not None:
        cfg = apply_scale(cfg, scale)
        _validate(cfg)
    return cfg


def load_config(path, scale: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a YAML config; ``path`` may also name a bundled preset."""
    p = Path(path)
    if not p.exists():
        preset = resources.files("hopcast") / "presets" / (p.name if p.suffix else p.name + ".yml")
        if not preset.is_file():
            raise ConfigError(f"config file {path} not found")
        text = preset.read_text()
    else:
        text = p.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if seed is not None:
        data = {**data, "seeds": [int(seed)]}
    return config_from_dict(data, scale)


def list_presets() -> list:
    return sorted(p.name for p in (resources.files("hopcast") / "presets").iterdir()
                  if p.name.endswith(".yml"))
