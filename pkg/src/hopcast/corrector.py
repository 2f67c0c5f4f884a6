"""Context-conditioned error retrieval with an encoder and a modern Hopfield
association memory.

One correction model is trained per predictor output channel. Training
pairs autoregressive contexts (queries) with integrated contexts (keys) and
the predictor's errors (values); each query attends over the other keys of
its batch with its own key masked out. At inference a query attends over a
fixed memory of encoded keys and a set of errors is drawn from the
resulting categorical distribution.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .dynamics import TrajectorySet
from .tensor_nn import (EarlyStopper, MlpParams, Standardizer, init_mlp, make_optimizer,
                        mlp_backward, mlp_forward, optimizer_step, seed_sequence)

logger = logging.getLogger(__name__)

LEVELS = np.round(np.arange(1, 10) / 10, 1)


def level_probs(levels=LEVELS) -> np.ndarray:
    """Quantile probabilities ``(alpha_1, 1-alpha_1, alpha_2, ...)``, alpha = (1-z)/2."""
    alpha = (1.0 - np.asarray(levels, dtype=float)) / 2.0
    return np.stack([alpha, 1.0 - alpha], axis=1).ravel()


# --- contexts --------------------------------------------------------------

def context_states(data: np.ndarray, include_initial: bool = True) -> np.ndarray:
    """``N x T x (2C+1)`` contexts ``(initial || current || t)``, t starting at 1."""
    n, t_len, c = data.shape
    t = np.broadcast_to(np.arange(1, t_len + 1, dtype=float)[None, :, None], (n, t_len, 1))
    parts = [data, t]
    if include_initial:
        parts.insert(0, np.broadcast_to(data[:, :1], data.shape))
    return np.concatenate(parts, axis=2)


@dataclass
class ContextPools:
    """Aligned, shuffled query / key / error pools.

    Row ``i`` of ``queries``, ``keys`` and ``errors`` all refer to trajectory
    ``index[i, 0]`` at timestep ``index[i, 1]`` (1-based).
    """

    queries: np.ndarray
    keys: np.ndarray
    errors: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.keys)

    @property
    def width(self) -> int:
        return self.keys.shape[1]


def build_context_sets(integrated: TrajectorySet, autoregressive: TrajectorySet, rng_seed=0,
                       include_initial: bool = True, shuffle: bool = True) -> ContextPools:
    """Flatten both trajectory sets into context pools with paired errors."""
    if integrated.data.shape != autoregressive.data.shape:
        raise ValueError(f"shape mismatch {integrated.data.shape} vs {autoregressive.data.shape}")
    n, t_len, _ = integrated.data.shape
    keys = context_states(integrated.data, include_initial).reshape(n * t_len, -1)
    queries = context_states(autoregressive.data, include_initial).reshape(n * t_len, -1)
    errors = (integrated.data - autoregressive.data).reshape(n * t_len, -1)
    ids = np.repeat(integrated.traj_ids, t_len)
    steps = np.tile(np.arange(1, t_len + 1), n)
    order = np.random.default_rng(rng_seed).permutation(n * t_len) if shuffle \
        else np.arange(n * t_len)
    return ContextPools(queries[order], keys[order], errors[order],
                        np.stack([ids, steps], axis=1)[order])


@dataclass
class TripletBatch:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    index: np.ndarray


def sample_triplet_batch(pools: ContextPools, channel: int, seq_len: int,
                         rng: np.random.Generator) -> TripletBatch:
    """``seq_len`` distinct pool rows as one (Q, K, V) triplet."""
    if seq_len > len(pools):
        raise ValueError(f"sequence length {seq_len} exceeds pool size {len(pools)}")
    rows = rng.choice(len(pools), size=seq_len, replace=False)
    return TripletBatch(pools.queries[rows], pools.keys[rows], pools.errors[rows, channel],
                        pools.index[rows])


# --- attention -------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def masked_attention(q_emb: np.ndarray, k_emb: np.ndarray, values: np.ndarray,
                     mask_diagonal: bool = True):
    """Association matrix ``softmax(Q K^T / sqrt(d))`` and retrieved values.

    Works on one triplet (``S x d``) or a stack of them (``B x S x d``). With
    ``mask_diagonal`` each query's own key is excluded, so ``A[i, i] == 0``.
    """
    s_len, d = q_emb.shape[-2], q_emb.shape[-1]
    if mask_diagonal and s_len < 2:
        raise ValueError("masked attention needs a sequence length of at least 2")
    logits = q_emb @ np.swapaxes(k_emb, -1, -2) / np.sqrt(d)
    if mask_diagonal:
        diag = np.arange(s_len)
        logits[..., diag, diag] = -np.inf
    attn = _softmax(logits)
    return attn, (attn @ values[..., None])[..., 0]


def masked_attention_backward(q_emb, k_emb, values, attn, grad_retrieved):
    """Gradients of a scalar loss w.r.t. the query and key embeddings."""
    d = q_emb.shape[-1]
    g_attn = grad_retrieved[..., :, None] * values[..., None, :]
    g_logits = attn * (g_attn - np.sum(g_attn * attn, axis=-1, keepdims=True))
    g_logits /= np.sqrt(d)
    return g_logits @ k_emb, np.swapaxes(g_logits, -1, -2) @ q_emb


def retrieval_loss(q_emb, k_emb, values):
    """Mean over triplets of ``(1/S) ||V - A V||^2``, with embedding gradients."""
    attn, retrieved = masked_attention(q_emb, k_emb, values)
    resid = retrieved - values
    n = resid.size
    loss = float(np.sum(resid * resid) / n)
    g_q, g_k = masked_attention_backward(q_emb, k_emb, values, attn, (2.0 / n) * resid)
    return loss, g_q, g_k, attn


# --- model -----------------------------------------------------------------

@dataclass
class CorrectorConfig:
    """Training and retrieval knobs for one correction model."""

    seq_len: int = 100
    embed_dim: int = 4
    hidden: tuple = (100,)
    use_encoder: bool = True
    include_initial: bool = True
    shuffle: bool = True
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 100
    triplets_per_batch: int = 8
    patience: int = 20
    holdout_fraction: float = 0.1
    memory_size: int = 2000
    n_samples: int = 1000
    retrieval: str = "Sample"
    dtype: str = "float64"

    def __post_init__(self):
        if self.seq_len < 2:
            raise ValueError("sequence length must be at least 2")
        if self.embed_dim < 1:
            raise ValueError("embedding dimension must be positive")
        if self.retrieval not in ("Sample", "TopK"):
            raise ValueError(f"unknown retrieval mode {self.retrieval!r}")


@dataclass
class CorrectionModel:
    """Encoder for one channel plus the scaling applied to its contexts."""

    channel: int
    encoder: Optional[MlpParams]
    context_stats: Standardizer
    value_scale: float
    config: CorrectorConfig
    history: dict = field(default_factory=dict, repr=False)
    trained: bool = False

    @property
    def embed_dim(self) -> int:
        return self.encoder.layer_sizes[-1] if self.encoder is not None else \
            len(self.context_stats.mean)

    def encode(self, contexts: np.ndarray) -> np.ndarray:
        z = self.context_stats.transform(np.atleast_2d(contexts))
        if self.encoder is None:
            return z
        return mlp_forward(self.encoder, z).astype(np.float64)


def _triplet_rows(n_rows: int, seq_len: int, rng, shuffle: bool) -> np.ndarray:
    """Partition ``n_rows`` into ``n_rows // seq_len`` triplets of distinct rows."""
    n_trip = n_rows // seq_len
    if shuffle:
        return rng.permutation(n_rows)[: n_trip * seq_len].reshape(n_trip, seq_len)
    start = rng.integers(0, n_rows - n_trip * seq_len + 1)
    rows = np.arange(start, start + n_trip * seq_len).reshape(n_trip, seq_len)
    return rows[rng.permutation(n_trip)]


def _encode_pair(encoder, q, k):
    """Run the encoder on stacked queries and keys of ``B x S x W`` triplets."""
    b, s, w = q.shape
    out, acts = mlp_forward(encoder, np.concatenate([q, k]).reshape(-1, w), keep_cache=True)
    out = out.reshape(2 * b, s, -1)
    return out[:b], out[b:], acts


def encoder_loss_and_grad(encoder: MlpParams, q: np.ndarray, k: np.ndarray,
                          v: np.ndarray):
    """Retrieval loss of ``B x S`` triplets and its flat encoder gradient."""
    qe, ke, acts = _encode_pair(encoder, q, k)
    loss, g_q, g_k, _ = retrieval_loss(qe, ke, v)
    g = np.concatenate([g_q, g_k]).reshape(-1, qe.shape[-1])
    return loss, mlp_backward(encoder, acts, g)


def train_correction_model(pools: ContextPools, channel: int,
                           config: Optional[CorrectorConfig] = None,
                           rng_seed=0) -> CorrectionModel:
    """AdamW-train the encoder to minimise masked retrieval error.

    Values are divided by their standard deviation during training so the
    loss scale does not depend on the channel's units. The snapshot with the
    lowest loss on held-out triplets is kept.
    """
    cfg = config or CorrectorConfig()
    if cfg.seq_len > len(pools):
        raise ValueError(f"sequence length {cfg.seq_len} exceeds pool size {len(pools)}")
    stats = Standardizer.fit(pools.keys)
    values = pools.errors[:, channel]
    scale = float(values.std())
    # rounding noise on constant errors must not be amplified to unit scale
    if scale <= 1e-12 * max(1.0, float(np.abs(values).max(initial=0.0))):
        scale = 1.0
    model = CorrectionModel(channel, None, stats, scale, cfg)
    if not cfg.use_encoder:
        model.trained = True
        return model

    seeds = seed_sequence(rng_seed).spawn(3)
    width = pools.width
    encoder = init_mlp([width, *cfg.hidden, cfg.embed_dim], seeds[0], dtype=cfg.dtype)
    opt = make_optimizer(encoder, "AdamW", cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(seeds[1])

    q_all = stats.transform(pools.queries).astype(cfg.dtype)
    k_all = stats.transform(pools.keys).astype(cfg.dtype)
    v_all = (values / scale).astype(cfg.dtype)
    n_hold = int(round(len(pools) * cfg.holdout_fraction))
    if n_hold < cfg.seq_len:
        n_hold = 0
    hold = slice(0, n_hold)
    train = slice(n_hold, len(pools))
    n_train = len(pools) - n_hold
    if n_train < cfg.seq_len:
        raise ValueError("training pool smaller than one triplet")
    hold_rows = _triplet_rows(n_hold, cfg.seq_len, np.random.default_rng(seeds[2]),
                              cfg.shuffle) if n_hold else None

    def holdout_loss(enc):
        if hold_rows is None:
            return train_loss_hist[-1]
        q = q_all[hold][hold_rows]
        k = k_all[hold][hold_rows]
        qe = mlp_forward(enc, q.reshape(-1, width)).reshape(*hold_rows.shape, -1)
        ke = mlp_forward(enc, k.reshape(-1, width)).reshape(*hold_rows.shape, -1)
        _, retrieved = masked_attention(qe, ke, v_all[hold][hold_rows])
        return float(np.mean((retrieved - v_all[hold][hold_rows]) ** 2))

    q_tr, k_tr, v_tr = q_all[train], k_all[train], v_all[train]
    stopper = EarlyStopper(cfg.patience)
    train_loss_hist, hold_loss_hist = [], []
    for epoch in range(cfg.epochs):
        rows = _triplet_rows(n_train, cfg.seq_len, rng, cfg.shuffle)
        total = 0.0
        for start in range(0, len(rows), cfg.triplets_per_batch):
            r = rows[start:start + cfg.triplets_per_batch]
            loss, grad = encoder_loss_and_grad(encoder, q_tr[r], k_tr[r], v_tr[r])
            if not np.isfinite(loss):
                raise FloatingPointError(f"channel {channel}: non-finite loss at epoch {epoch}")
            optimizer_step(opt, encoder, grad)
            total += loss * len(r)
        train_loss_hist.append(total / len(rows))
        hold_loss_hist.append(holdout_loss(encoder))
        if stopper.update(epoch, hold_loss_hist[-1], encoder.flat):
            break
    if stopper.snapshot is not None:
        encoder = MlpParams(encoder.layer_sizes, stopper.snapshot)
    model.encoder = encoder
    model.trained = True
    model.history = {"train_loss": train_loss_hist, "holdout_loss": hold_loss_hist,
                     "best_epoch": stopper.best_epoch}
    logger.info("channel %d corrector: S_L=%d, %d epochs, best holdout %.4g", channel,
                cfg.seq_len, len(train_loss_hist), stopper.best)
    return model


# --- memory and retrieval --------------------------------------------------

@dataclass(frozen=True)
class AssociationMemory:
    encoded_keys: np.ndarray
    values: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        if len(self.encoded_keys) != len(self.values):
            raise ValueError("keys and values are not aligned")
        self.encoded_keys.setflags(write=False)
        self.values.setflags(write=False)

    def __len__(self):
        return len(self.values)


def build_association_memory(model: CorrectionModel, pools: ContextPools, channel: int,
                             memory_size: int = 2000, rng_seed=0) -> AssociationMemory:
    """Encode ``memory_size`` integrated contexts drawn without replacement."""
    if memory_size > len(pools):
        raise ValueError(f"memory size {memory_size} exceeds pool size {len(pools)}")
    if memory_size < 1:
        raise ValueError("memory must hold at least one key")
    rows = np.random.default_rng(rng_seed).choice(len(pools), size=memory_size, replace=False)
    return AssociationMemory(model.encode(pools.keys[rows]),
                             np.array(pools.errors[rows, channel], dtype=np.float64), rows)


def attention_weights(model: CorrectionModel, memory: AssociationMemory,
                      contexts: np.ndarray) -> np.ndarray:
    """Unmasked inference weights ``softmax(q K_mem^T / sqrt(d))``, one row per query."""
    q = model.encode(contexts)
    return _softmax(q @ memory.encoded_keys.T / np.sqrt(q.shape[1]))


def retrieve_errors(model: CorrectionModel, memory: AssociationMemory, query: np.ndarray,
                    n_samples: int = 1000, mode: str = "Sample", rng=None):
    """Error set for one context.

    ``Sample`` draws ``n_samples`` memory indices i.i.d. from the attention
    categorical (inverse-CDF on uniforms from ``rng``) and returns equal
    weights. ``TopK`` returns the ``n_samples`` highest-weight entries with
    their weights renormalised.
    """
    if len(memory) == 0:
        raise ValueError("empty association memory")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    weights = attention_weights(model, memory, np.asarray(query)[None])[0]
    return errors_from_weights(weights, memory.values, n_samples, mode, rng)


def errors_from_weights(weights, values, n_samples, mode="Sample", rng=None):
    if mode == "Sample":
        rng = np.random.default_rng(rng)
        cum = np.cumsum(weights)
        idx = np.searchsorted(cum, rng.random(n_samples) * cum[-1], side="right")
        idx = np.minimum(idx, len(values) - 1)
        return values[idx], np.full(n_samples, 1.0 / n_samples)
    if mode == "TopK":
        if n_samples > len(values):
            raise ValueError("top-k size exceeds memory size")
        top = np.argsort(-weights, kind="stable")[:n_samples]
        w = weights[top]
        return values[top], w / w.sum()
    raise ValueError(f"unknown retrieval mode {mode!r}")


def correct_and_interval(raw: float, errors: np.ndarray, weights: Optional[np.ndarray] = None,
                         levels=LEVELS):
    """Corrected mean ``raw + sum(w E)`` and per-level ``raw + [Q_a(E), Q_{1-a}(E)]``.

    Quantiles use linear interpolation between order statistics.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("empty error set")
    if weights is None:
        shift = errors.mean()
    else:
        shift = float(np.dot(weights, errors))
    q = np.quantile(errors, level_probs(levels)).reshape(-1, 2)
    return raw + shift, raw + q[:, 0], raw + q[:, 1]


# --- evaluation -----------------------------------------------------------

@dataclass
class IntervalSheet:
    """Point predictions and nested intervals for ``N x T x C`` evaluation points."""

    method: str
    traj_ids: np.ndarray
    raw: np.ndarray
    corrected: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    truth: Optional[np.ndarray] = None
    levels: np.ndarray = field(default_factory=lambda: LEVELS.copy())
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.lower.shape != self.upper.shape or self.lower.shape[:-1] != self.raw.shape:
            raise ValueError("interval arrays do not match the prediction shape")
        self.dropped = np.asarray(self.dropped, dtype=np.int64)

    @property
    def shape(self):
        return self.raw.shape

    def subset_time(self, t_slice) -> "IntervalSheet":
        return IntervalSheet(self.method, self.traj_ids, self.raw[:, t_slice],
                             self.corrected[:, t_slice], self.lower[:, t_slice],
                             self.upper[:, t_slice],
                             None if self.truth is None else self.truth[:, t_slice], self.levels,
                             self.dropped)

    def to_csv(self, path) -> None:
        n, t_len, c = self.raw.shape
        pct = [int(round(z * 100)) for z in self.levels]
        header = ["method", "traj_id", "t", "channel", "raw", "corrected", "truth"]
        header += [f"lo_{p}" for p in pct] + [f"hi_{p}" for p in pct]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(n):
                for t in range(t_len):
                    for ch in range(c):
                        truth = "" if self.truth is None else repr(float(self.truth[i, t, ch]))
                        w.writerow([self.method, int(self.traj_ids[i]), t + 1, ch,
                                    repr(float(self.raw[i, t, ch])),
                                    repr(float(self.corrected[i, t, ch])), truth]
                                   + [repr(float(v)) for v in self.lower[i, t, ch]]
                                   + [repr(float(v)) for v in self.upper[i, t, ch]])

    @classmethod
    def from_csv(cls, path) -> "IntervalSheet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n_lv = (len(header) - 7) // 2
        ids = sorted({int(r[1]) for r in body}, key=[int(r[1]) for r in body].index)
        t_len = max(int(r[2]) for r in body)
        c = max(int(r[3]) for r in body) + 1
        pos = {k: i for i, k in enumerate(ids)}
        shape = (len(ids), t_len, c)
        raw, corr, truth = np.empty(shape), np.empty(shape), np.full(shape, np.nan)
        lo, hi = np.empty(shape + (n_lv,)), np.empty(shape + (n_lv,))
        for r in body:
            i, t, ch = pos[int(r[1])], int(r[2]) - 1, int(r[3])
            raw[i, t, ch], corr[i, t, ch] = float(r[4]), float(r[5])
            if r[6]:
                truth[i, t, ch] = float(r[6])
            lo[i, t, ch] = [float(v) for v in r[7:7 + n_lv]]
            hi[i, t, ch] = [float(v) for v in r[7 + n_lv:]]
        levels = np.array([int(h[3:]) / 100 for h in header[7:7 + n_lv]])
        return cls(body[0][0], np.array(ids), raw, corr, lo, hi,
                   None if np.isnan(truth).all() else truth, levels)


def _query_uniforms(rng_seed, channel: int, traj_id: int, shape) -> np.ndarray:
    ss = np.random.SeedSequence([int(rng_seed), int(channel), int(traj_id)])
    return np.random.default_rng(ss).random(shape)


def channel_intervals(model: CorrectionModel, memory: AssociationMemory, raw: np.ndarray,
                      traj_ids, n_samples: int = 1000, mode: str = "Sample", rng_seed=0,
                      levels=LEVELS):
    """Expected-error shift and interval offsets for one channel of raw rollouts.

    ``raw`` is ``N x T x C``; returns ``shift`` (``N x T``) and quantile
    offsets ``lower``/``upper`` (``N x T x levels``) to be added to the raw
    channel values. Random streams are derived from ``(rng_seed, channel,
    trajectory id)`` so results do not depend on batching.
    """
    n, t_len, _ = raw.shape
    probs = level_probs(levels)
    ctx = context_states(raw, model.config.include_initial)
    shift = np.empty((n, t_len))
    q_all = np.empty((n, t_len, len(probs)))
    values = np.ascontiguousarray(memory.values)
    for i in range(n):
        w = attention_weights(model, memory, ctx[i])
        if mode == "Sample":
            u = _query_uniforms(rng_seed, model.channel, traj_ids[i], (t_len, n_samples))
            shift[i], q_all[i] = kernels.sample_quantile_stats(np.cumsum(w, axis=1), values,
                                                               u, probs)
        elif mode == "TopK":
            if n_samples > len(memory):
                raise ValueError("top-k size exceeds memory size")
            top = np.argsort(-w, axis=1, kind="stable")[:, :n_samples]
            wt = np.take_along_axis(w, top, axis=1)
            e = values[top]
            shift[i] = np.sum(wt * e, axis=1) / wt.sum(axis=1)
            q_all[i] = np.quantile(e, probs, axis=1).T
        else:
            raise ValueError(f"unknown retrieval mode {mode!r}")
    q_all = q_all.reshape(n, t_len, -1, 2)
    return shift, q_all[..., 0], q_all[..., 1]


def hopcast_evaluate(predictor, models: Sequence[CorrectionModel],
                     memories: Sequence[AssociationMemory], inference: TrajectorySet,
                     n_samples: int = 1000, mode: str = "Sample", rng_seed=0,
                     levels=LEVELS) -> IntervalSheet:
    """Roll the predictor out on held-out trajectories and correct every step.

    At step ``t`` the context ``(initial || current || t)`` of the raw rollout
    queries each channel's memory. The rollout propagates raw predictor
    output; corrections are applied for reporting only. Trajectories whose
    rollout diverges are left out and listed on ``sheet.dropped``.
    """
    from .predictor import rollout_batch

    data = inference.data
    n, t_len, c = data.shape
    if len(models) != c or len(memories) != c:
        raise ValueError(f"need one correction model and memory per channel ({c})")
    raw = rollout_batch(predictor, data[:, 0], t_len)
    kept = np.all(np.isfinite(raw), axis=(1, 2))
    if not kept.any():
        raise FloatingPointError("predictor rollout diverged on every inference trajectory")
    if not kept.all():
        logger.warning("hopcast: %d of %d inference rollouts diverged and are left out of "
                       "evaluation", int((~kept).sum()), n)
    dropped = inference.traj_ids[~kept]
    raw, data, ids = raw[kept], data[kept], inference.traj_ids[kept]
    n = len(raw)
    corrected = np.empty_like(raw)
    lower = np.empty(raw.shape + (len(levels),))
    upper = np.empty_like(lower)
    for ch, (model, memory) in enumerate(zip(models, memories)):
        shift, lo, hi = channel_intervals(model, memory, raw, ids, n_samples, mode, rng_seed,
                                          levels)
        corrected[..., ch] = raw[..., ch] + shift
        lower[:, :, ch] = raw[..., ch, None] + lo
        upper[:, :, ch] = raw[..., ch, None] + hi
    return IntervalSheet("hopcast", ids, raw, corrected, lower, upper, data.copy(),
                         np.asarray(levels, dtype=float), dropped)


@dataclass
class HopcastCorrector:
    """Trained per-channel models and memories, ready for evaluation."""

    models: list
    memories: list

    @classmethod
    def fit(cls, pools: ContextPools, configs: Sequence[CorrectorConfig], rng_seed=0):
        seeds = seed_sequence(rng_seed).spawn(2 * len(configs))
        models, memories = [], []
        for ch, cfg in enumerate(configs):
            m = train_correction_model(pools, ch, cfg, seeds[2 * ch])
            models.append(m)
            memories.append(build_association_memory(m, pools, ch, min(cfg.memory_size,
                                                                       len(pools)),
                                                      seeds[2 * ch + 1]))
        return cls(models, memories)

    def evaluate(self, predictor, inference: TrajectorySet, rng_seed=0) -> IntervalSheet:
        cfg = self.models[0].config
        return hopcast_evaluate(predictor, self.models, self.memories, inference,
                                cfg.n_samples, cfg.retrieval, rng_seed)

    def save(self, directory) -> None:
        from .tensor_nn import save_checkpoint
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for m, mem in zip(self.models, self.memories):
            meta = {"channel": m.channel, "seq_len": m.config.seq_len,
                    "embed_dim": m.embed_dim, "memory_size": len(mem),
                    "value_scale": m.value_scale, "use_encoder": m.config.use_encoder}
            if m.encoder is not None:
                save_checkpoint(out / f"encoder_{m.channel}.json", m.encoder,
                                input_stats=m.context_stats, optimizer_kind="AdamW", extra=meta)
            np.savez(out / f"memory_{m.channel}.npz", encoded_keys=mem.encoded_keys,
                     values=mem.values, rows=mem.rows)
