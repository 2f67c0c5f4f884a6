"""Minimal dense-network core.

Parameters live in one flat buffer; per-layer weights and biases are views
into it, so optimizers update everything with a handful of vectorized ops.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 5.0
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


class MlpParams:
    """Weights and biases of a ReLU MLP with an identity output layer."""

    def __init__(self, layer_sizes: Sequence[int], flat: Optional[np.ndarray] = None,
                 dtype=np.float64):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        self.layer_sizes = sizes
        n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        if flat is None:
            flat = np.zeros(n, dtype=dtype)
        flat = np.asarray(flat)
        if flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {flat.shape}")
        self.flat = flat
        self.weights, self.biases = _views(sizes, self.flat)

    @property
    def dtype(self):
        return self.flat.dtype

    @property
    def n_params(self) -> int:
        return self.flat.size

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, self.flat.copy())

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(self.layer_sizes, self.flat.astype(dtype))

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, np.zeros_like(self.flat))


def _views(sizes, flat):
    weights, biases, off = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[off:off + a * b].reshape(a, b))
        off += a * b
        biases.append(flat[off:off + b])
        off += b
    return weights, biases


def init_mlp(layer_sizes: Sequence[int], rng_seed, dtype=np.float64) -> MlpParams:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(rng_seed)
    params = MlpParams(layer_sizes, dtype=np.float64)
    for w in params.weights:
        bound = np.sqrt(6.0 / w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params.astype(dtype)


def mlp_forward(params: MlpParams, batch: np.ndarray, keep_cache: bool = False):
    """Forward pass. Returns the output, plus the activations if ``keep_cache``."""
    x = np.asarray(batch, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"batch must be B x {params.layer_sizes[0]}, got {x.shape}")
    acts = [x]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w
        x += b
        if i < last:
            np.maximum(x, 0, out=x)
        acts.append(x)
    return (x, acts) if keep_cache else x


def mlp_backward(params: MlpParams, acts: list, grad_out: np.ndarray,
                 need_input_grad: bool = False):
    """Backpropagate ``grad_out`` (dLoss/dOutput). Returns a flat gradient
    buffer shaped like ``params.flat`` (and dLoss/dInput if requested)."""
    grads = params.zeros_like()
    g = np.asarray(grad_out, dtype=params.dtype)
    for i in range(len(params.weights) - 1, -1, -1):
        np.matmul(acts[i].T, g, out=grads.weights[i])
        g.sum(axis=0, out=grads.biases[i])
        if i > 0 or need_input_grad:
            g = g @ params.weights[i].T
            if i > 0:
                g *= acts[i] > 0
    return (grads.flat, g) if need_input_grad else grads.flat


# --- losses ---------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements, with its gradient."""
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def clamp_log_var(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, LOG_VAR_MIN, LOG_VAR_MAX)


def gaussian_nll_loss(mean: np.ndarray, log_var: np.ndarray, target: np.ndarray):
    """Mean of ``0.5 * (log_var + (target - mean)^2 exp(-log_var))``.

    ``log_var`` is clamped to ``[-10, 5]``; the clamp passes zero gradient
    outside that range. Returns ``(loss, d_mean, d_log_var)``.
    """
    if not (mean.shape == log_var.shape == target.shape):
        raise ValueError("mean, log_var and target shapes differ")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))
            and np.all(np.isfinite(target))):
        raise ValueError("non-finite input to gaussian_nll_loss")
    lv = clamp_log_var(log_var)
    inv_var = np.exp(-lv)
    resid = target - mean
    sq = resid * resid * inv_var
    n = mean.size
    loss = float(0.5 * np.mean(lv + sq))
    d_mean = (-1.0 / n) * resid * inv_var
    d_lv = (0.5 / n) * (1.0 - sq)
    d_lv[(log_var < LOG_VAR_MIN) | (log_var > LOG_VAR_MAX)] = 0.0
    return loss, d_mean, d_lv


def split_mean_logvar(out: np.ndarray):
    c = out.shape[1] // 2
    return out[:, :c], out[:, c:]


def loss_and_grad(params: MlpParams, inputs: np.ndarray, targets: np.ndarray, loss_kind: str):
    """Loss on one batch and the flat parameter gradient."""
    out, acts = mlp_forward(params, inputs, keep_cache=True)
    if loss_kind == "mse":
        loss, g_out = mse_loss(out, targets)
    elif loss_kind == "gaussian_nll":
        mean, lv = split_mean_logvar(out)
        loss, d_mean, d_lv = gaussian_nll_loss(mean, lv, targets)
        g_out = np.concatenate([d_mean, d_lv], axis=1)
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    return loss, mlp_backward(params, acts, g_out)


def batch_loss(params: MlpParams, inputs, targets, loss_kind: str, chunk: int = 8192) -> float:
    """Loss over a dataset, evaluated in chunks (no gradient)."""
    total = 0.0
    for i in range(0, len(inputs), chunk):
        out = mlp_forward(params, inputs[i:i + chunk])
        if loss_kind == "mse":
            part = float(np.sum((out - targets[i:i + chunk]) ** 2)) / out.shape[1]
        else:
            mean, lv = split_mean_logvar(out)
            lv = clamp_log_var(lv)
            part = float(0.5 * np.sum(lv + (targets[i:i + chunk] - mean) ** 2 * np.exp(-lv)))
            part /= mean.shape[1]
        total += part
    return total / len(inputs)


# --- optimizers -----------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    lr: float
    m: np.ndarray
    v: np.ndarray
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("Adam", "AdamW"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def make_optimizer(params: MlpParams, kind: str = "Adam", lr: float = 1e-3,
                   weight_decay: Optional[float] = None) -> OptimizerState:
    if weight_decay is None:
        weight_decay = 0.01 if kind == "AdamW" else 0.0
    if kind == "Adam" and weight_decay:
        raise ValueError("plain Adam takes no weight decay; use AdamW")
    return OptimizerState(kind, lr, np.zeros_like(params.flat), np.zeros_like(params.flat),
                          weight_decay=weight_decay)


def optimizer_step(opt: OptimizerState, params: MlpParams, grad: np.ndarray) -> None:
    """In-place Adam / AdamW (decoupled weight decay) update."""
    b1, b2 = opt.betas
    opt.step += 1
    if opt.kind == "AdamW" and opt.weight_decay:
        params.flat *= 1.0 - opt.lr * opt.weight_decay
    opt.m *= b1
    opt.m += (1.0 - b1) * grad
    opt.v *= b2
    opt.v += (1.0 - b2) * grad * grad
    step_size = opt.lr / (1.0 - b1 ** opt.step)
    denom = np.sqrt(opt.v / (1.0 - b2 ** opt.step))
    denom += opt.eps
    params.flat -= step_size * opt.m / denom


# --- training -------------------------------------------------------------

@dataclass
class Standardizer:
    """Per-channel affine scaling; zero-variance channels get unit scale."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        std = x.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(x.mean(axis=0), std)

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


@dataclass
class EarlyStopper:
    """Tracks the best holdout loss and keeps a parameter snapshot."""

    patience: int
    best: float = np.inf
    best_epoch: int = -1
    snapshot: Optional[np.ndarray] = None
    bad_epochs: int = 0

    def update(self, epoch: int, loss: float, flat: np.ndarray) -> bool:
        """Record ``loss``; return True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            self.snapshot = flat.copy()
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    params: MlpParams
    train_loss: list = field(default_factory=list)
    holdout_loss: list = field(default_factory=list)
    best_epoch: int = -1


def holdout_split(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_hold = int(round(n * fraction)) if n > 1 else 0
    n_hold = min(max(n_hold, 1 if n > 1 else 0), n - 1)
    return perm[n_hold:], perm[:n_hold]


def train_epochs(params: MlpParams, optimizer: OptimizerState, inputs: np.ndarray,
                 targets: np.ndarray, loss_kind: str = "mse", batch_size: int = 128,
                 max_epochs: int = 1000, early_stop_patience: int = 20, rng_seed=0,
                 holdout_fraction: float = 0.1) -> TrainResult:
    """Minibatch training with early stopping on a 90/10 internal holdout.

    Returns a copy of the parameters with the lowest holdout loss (the input
    parameters unchanged when ``max_epochs == 0``).
    """
    inputs = np.asarray(inputs, dtype=params.dtype)
    targets = np.asarray(targets, dtype=params.dtype)
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng(rng_seed)
    train_idx, hold_idx = holdout_split(len(inputs), holdout_fraction, rng)
    x_tr, y_tr = inputs[train_idx], targets[train_idx]
    x_ho, y_ho = inputs[hold_idx], targets[hold_idx]
    if len(x_ho) == 0:
        x_ho, y_ho = x_tr, y_tr
    work = params.copy()
    result = TrainResult(params.copy())
    stopper = EarlyStopper(early_stop_patience)
    for epoch in range(max_epochs):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, grad = loss_and_grad(work, x_tr[idx], y_tr[idx], loss_kind)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite {loss_kind} loss at epoch {epoch}, batch {start // batch_size}")
            optimizer_step(optimizer, work, grad)
            total += loss * len(idx)
        result.train_loss.append(total / len(x_tr))
        hold = batch_loss(work, x_ho, y_ho, loss_kind)
        if not np.isfinite(hold):
            raise TrainingDivergedError(f"non-finite holdout loss at epoch {epoch}")
        result.holdout_loss.append(hold)
        if stopper.update(epoch, hold, work.flat):
            break
    if stopper.snapshot is not None:
        result.params = MlpParams(params.layer_sizes, stopper.snapshot)
        result.best_epoch = stopper.best_epoch
    return result


# --- gradient checking ----------------------------------------------------

def finite_diff_gradcheck(params: MlpParams,
                          loss_closure: Callable[[MlpParams], tuple],
                          epsilon: float = 1e-5, n_coords: int = 64, rng_seed=0,
                          abs_floor: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_closure(params) -> (loss, flat_grad)``. Checks ``n_coords``
    randomly chosen coordinates (all of them when there are fewer). The
    relative error uses ``max(|analytic|, |numeric|, abs_floor)`` as
    denominator so that vanishing gradients compare on an absolute scale.
    """
    p = params.astype(np.float64)
    _, analytic = loss_closure(p)
    analytic = np.asarray(analytic, dtype=np.float64).copy()
    rng = np.random.default_rng(rng_seed)
    n = p.n_params
    coords = rng.choice(n, size=min(n_coords, n), replace=False)
    worst = 0.0
    for i in coords:
        orig = p.flat[i]
        p.flat[i] = orig + epsilon
        up = loss_closure(p)[0]
        p.flat[i] = orig - epsilon
        down = loss_closure(p)[0]
        p.flat[i] = orig
        numeric = (up - down) / (2 * epsilon)
        denom = max(abs(analytic[i]), abs(numeric), abs_floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path, params: MlpParams, *, input_stats: Optional[Standardizer] = None,
                    output_stats: Optional[Standardizer] = None, optimizer_kind: str = "Adam",
                    extra: Optional[dict] = None) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": params.layer_sizes,
        "dtype": str(params.dtype),
        "params": params.flat.astype(np.float64).tolist(),
        "optimizer": optimizer_kind,
        "input_stats": None if input_stats is None else input_stats.to_dict(),
        "output_stats": None if output_stats is None else output_stats.to_dict(),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> dict:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    blob["params"] = MlpParams(blob["layer_sizes"],
                               np.array(blob["params"]).astype(blob["dtype"]))
    for key in ("input_stats", "output_stats"):
        if blob[key] is not None:
            blob[key] = Standardizer.from_dict(blob[key])
    return blob
