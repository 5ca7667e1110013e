"""Contrastive-divergence training for the plain and label-consistent RBMs."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp
from scipy.special import softmax

from .rbm import (
    BLOCK_NAMES,
    ModelDims,
    init_params,
    sample_categorical,
    sigmoid,
)

log = logging.getLogger(__name__)

# SeedSequence tags keep the init, shuffle and chain streams apart
_SHUFFLE_STREAM = 1
_CHAIN_STREAM = 2

MODEL_VARIANTS = {"plain": "none", "item": "item", "user": "user"}
# sparsity penalty weight used when a config leaves it unset; see the notes in README
SPARSITY_WEIGHT_DEFAULTS = {"plain": 0.01, "item": 0.01, "user": 0.05}


class NumericalError(RuntimeError):
    """Raised when an update produces non-finite parameters."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    epochs: int = 100
    hidden_units: int = 100
    cd_steps: int = 1
    minibatch_size: int = 100
    weight_decay: float = 0.0002
    momentum_initial: float = 0.5
    momentum_final: float = 0.9
    momentum_switch_epoch: int = 5
    sparsity_weight: float | None = None  # None: per-variant default
    sparsity_target: float = 0.05
    variant: str = "plain"
    sparse: bool = False
    seed: int = 0
    threads: int = 1
    init_scale: float = 0.01
    grad_normalization: str = "sum"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be at least 1")
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError("sparsity_target must lie in (0, 1)")
        if self.variant not in MODEL_VARIANTS:
            raise ValueError(f"variant must be one of {sorted(MODEL_VARIANTS)}")
        if self.sparsity_weight is None:
            self.sparsity_weight = SPARSITY_WEIGHT_DEFAULTS[self.variant]
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be non-negative")
        if self.epochs < 0 or self.minibatch_size < 1 or self.hidden_units < 1:
            raise ValueError("epochs, minibatch_size and hidden_units must be non-negative/positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.grad_normalization not in ("mean", "sum"):
            raise ValueError("grad_normalization is 'mean' or 'sum'")

    @property
    def model_variant(self):
        return MODEL_VARIANTS[self.variant]

    @property
    def effective_sparsity_weight(self):
        return self.sparsity_weight if self.sparse else 0.0

    def momentum_at(self, epoch):
        return self.momentum_initial if epoch <= self.momentum_switch_epoch else self.momentum_final

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class GradientAccumulator:
    """Summed per-case statistics; ``dW`` shares the unit-major layout of ``W``."""

    dW: np.ndarray
    d_vis_bias: np.ndarray
    d_hid_bias: np.ndarray
    d_label_weights: list = field(default_factory=list)
    d_label_biases: list = field(default_factory=list)
    case_count: int = 0

    @classmethod
    def zeros(cls, params, labels):
        F, m, K = params.W.shape
        return cls(
            np.zeros((m, K, F)).transpose(2, 0, 1),
            np.zeros((m, K)),
            np.zeros(F),
            [np.zeros_like(w) for w in labels.weights],
            [np.zeros_like(b) for b in labels.biases],
        )

    def arrays(self):
        return [self.dW, self.d_vis_bias, self.d_hid_bias, *self.d_label_weights, *self.d_label_biases]

    def merge(self, other):
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += theirs
        self.case_count += other.case_count
        return self

    def reset(self):
        for a in self.arrays():
            a.fill(0.0)
        self.case_count = 0

    def scaled(self, factor):
        out = GradientAccumulator(
            self.dW * factor, self.d_vis_bias * factor, self.d_hid_bias * factor,
            [w * factor for w in self.d_label_weights], [b * factor for b in self.d_label_biases],
            self.case_count,
        )
        return out


@dataclass
class CaseBatch:
    """Several cases packed CSR-style: entries ``indptr[b]:indptr[b+1]`` belong to case ``b``."""

    case_ids: np.ndarray
    indptr: np.ndarray
    rows: np.ndarray
    units: np.ndarray
    levels: np.ndarray  # 0-based rating levels
    labels: list  # one (B, size) array per label block

    @property
    def size(self):
        return self.case_ids.size

    @property
    def nnz(self):
        return self.units.size

    def matrix(self, levels, num_visible, K):
        data = np.ones(self.nnz)
        return sp.csr_matrix((data, self.units * K + levels, self.indptr),
                             shape=(self.size, num_visible * K))


def pack_cases(cases, case_ids=None, n_blocks=0):
    if case_ids is None:
        case_ids = np.arange(len(cases))
    lengths = np.array([len(c) for c in cases], dtype=np.int64)
    indptr = np.zeros(len(cases) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    if len(cases):
        units = np.concatenate([c.units for c in cases])
        levels = np.concatenate([c.ratings for c in cases]) - 1
    else:
        units = levels = np.zeros(0, dtype=np.int64)
    labels = [np.stack([c.labels[b] for c in cases]) for b in range(n_blocks)]
    rows = np.repeat(np.arange(len(cases)), lengths)
    return CaseBatch(np.asarray(case_ids, dtype=np.int64), indptr, rows, units, levels, labels)


@dataclass
class ChainNoise:
    """Uniform draws for T Gibbs steps of every case in a batch."""

    hidden: np.ndarray  # (T, B, F)
    visible: np.ndarray  # (T, nnz)
    labels: np.ndarray  # (T, total label draws)
    label_case: np.ndarray
    label_block: np.ndarray


def _label_counts(batch):
    if not batch.labels:
        return np.zeros((batch.size, 0), dtype=np.int64)
    return np.stack([np.rint(q.sum(axis=1)).astype(np.int64) for q in batch.labels], axis=1)


def draw_case_noise(rng, n_units, n_label_draws, F, T):
    """Per-case layout shared by the single-case and batched paths."""
    return rng.random((T, F)), rng.random((T, n_units)), rng.random((T, n_label_draws))


def chain_rng(seed, epoch, case_id):
    return np.random.default_rng([seed, _CHAIN_STREAM, epoch, case_id])


def draw_batch_noise(batch, F, T, rngs):
    counts = _label_counts(batch)
    n_draws = counts.sum(axis=1)
    hid, vis, lab = [], [], []
    lengths = np.diff(batch.indptr)
    for b, rng in enumerate(rngs):
        h, v, q = draw_case_noise(rng, int(lengths[b]), int(n_draws[b]), F, T)
        hid.append(h)
        vis.append(v)
        lab.append(q)
    hidden = np.stack(hid, axis=1) if hid else np.zeros((T, 0, F))
    visible = np.concatenate(vis, axis=1) if vis else np.zeros((T, 0))
    labels = np.concatenate(lab, axis=1) if lab else np.zeros((T, 0))
    n_blocks = counts.shape[1]
    label_case = np.repeat(np.repeat(np.arange(batch.size), n_blocks), counts.reshape(-1))
    label_block = np.repeat(np.tile(np.arange(n_blocks), batch.size), counts.reshape(-1))
    return ChainNoise(hidden, visible, labels, label_case, label_block)


@dataclass
class BatchStats:
    hidden_probs: np.ndarray  # positive-phase probabilities, (B, F)
    visible_counts: np.ndarray  # data one-hot counts summed over the batch, (m, K)
    recon_abs_error: float
    n_ratings: int


def _hidden_input(params, labels, V, label_values):
    x = V @ params.W.transpose(1, 2, 0).reshape(-1, params.num_hidden)
    x += params.hid_bias
    for w, q in zip(labels.weights, label_values):
        x += q @ w.T
    return x


def cd_batch(params, labels, batch, T, noise):
    """CD-T statistics summed over the cases of ``batch``.

    Positive phase uses hidden probabilities given the data; the chain
    samples binary hidden states between steps and uses probabilities at
    the final step.  Only each case's observed units are reconstructed.
    """
    F, m, K = params.W.shape
    grad = GradientAccumulator.zeros(params, labels)
    grad.case_count = batch.size
    W_flat = params.W.transpose(1, 2, 0).reshape(m * K, F)
    label_data = batch.labels if labels.active else []

    V0 = batch.matrix(batch.levels, m, K)
    ph0 = sigmoid(_hidden_input(params, labels, V0, label_data))
    dW_flat = grad.dW.transpose(1, 2, 0).reshape(m * K, F)
    dW_flat += V0.T @ ph0
    visible_counts = np.asarray(V0.sum(axis=0)).reshape(m, K)
    grad.d_vis_bias += visible_counts
    grad.d_hid_bias += ph0.sum(axis=0)
    for b, q in enumerate(label_data):
        grad.d_label_weights[b] += ph0.T @ q
        grad.d_label_biases[b] += q.sum(axis=0)

    h = (noise.hidden[0] < ph0).astype(np.float64)
    levels = batch.levels
    q_model = label_data
    ph = ph0
    for t in range(T):
        logits = (h @ W_flat.T).reshape(batch.size, m, K)[batch.rows, batch.units]
        logits += params.vis_bias[batch.units]
        p_vis = softmax(logits, axis=1)
        levels = sample_categorical(p_vis, noise.visible[t])
        if labels.active:
            q_model = []
            for b, (w, c) in enumerate(zip(labels.weights, labels.biases)):
                sel = noise.label_block == b
                rows = noise.label_case[sel]
                p_lab = softmax(h[rows] @ w + c, axis=1)
                idx = sample_categorical(p_lab, noise.labels[t][sel])
                size = c.shape[0]
                q_model.append(np.bincount(rows * size + idx, minlength=batch.size * size)
                               .reshape(batch.size, size).astype(np.float64))
        Vt = batch.matrix(levels, m, K)
        ph = sigmoid(_hidden_input(params, labels, Vt, q_model))
        if t < T - 1:
            h = (noise.hidden[t + 1] < ph).astype(np.float64)

    dW_flat -= Vt.T @ ph
    grad.d_vis_bias -= np.asarray(Vt.sum(axis=0)).reshape(m, K)
    grad.d_hid_bias -= ph.sum(axis=0)
    for b, q in enumerate(q_model):
        grad.d_label_weights[b] -= ph.T @ q
        grad.d_label_biases[b] -= q.sum(axis=0)

    expected = p_vis @ np.arange(1, K + 1)
    recon = float(np.abs(expected - (batch.levels + 1)).sum())
    return grad, BatchStats(ph0, visible_counts, recon, batch.nnz)


def cd_gradient(params, labels, case, T, rng):
    """CD-T contribution of a single case, drawing its chain noise from ``rng``."""
    n_blocks = len(labels.sizes) if labels.active else 0
    batch = pack_cases([case], n_blocks=n_blocks)
    counts = _label_counts(batch)
    h, v, q = draw_case_noise(rng, len(case), int(counts.sum()), params.num_hidden, T)
    noise = ChainNoise(h[:, None, :], v, q,
                       np.zeros(q.shape[1], dtype=np.int64),
                       np.repeat(np.arange(n_blocks), counts.reshape(-1)))
    grad, _ = cd_batch(params, labels, batch, T, noise)
    return grad


def sparsity_gradient(hidden_probs_batch, rho, weight, visible_mean=None):
    """Target-activation penalty pushing mean hidden activity towards ``rho``.

    Returns per-case ascent directions ``(d_hid_bias, dW)``: the hidden
    biases move by ``-weight * (q_j - rho)`` where ``q_j`` is the batch-mean
    activation; ``dW`` applies the same push scaled by the mean visible
    activity ``visible_mean`` (shape (m, K)), or is None if not given.
    """
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    q = np.asarray(hidden_probs_batch, dtype=np.float64).mean(axis=0)
    d_hid = -weight * (q - rho)
    dW = None
    if visible_mean is not None:
        dW = d_hid[:, None, None] * np.asarray(visible_mean)[None, :, :]
    return d_hid, dW


def _param_arrays(params, labels):
    return [params.W, params.vis_bias, params.hid_bias, *labels.weights, *labels.biases]


def _is_weight(params, labels):
    n = len(labels.weights)
    return [True, False, False, *([True] * n), *([False] * n)]


def apply_update(params, labels, grad, config, velocity, momentum=None, *, epoch=0, minibatch=0):
    """Momentum step ``v = momentum*v + lr*(g - decay*w); w += v`` in place.

    ``g`` is the accumulated gradient, divided by ``case_count`` when
    ``config.grad_normalization == "mean"``.  Decay touches weights only.
    """
    if grad.case_count < 1:
        raise ValueError("gradient accumulator is empty")
    if momentum is None:
        momentum = config.momentum_at(epoch)
    scale = 1.0 / grad.case_count if config.grad_normalization == "mean" else 1.0
    lr, decay = config.learning_rate, config.weight_decay
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, v, is_w in zip(_param_arrays(params, labels), grad.arrays(), velocity.arrays(),
                                 _is_weight(params, labels)):
            v *= momentum
            v += lr * scale * g
            if is_w and decay:
                v -= lr * decay * p
            p += v
    if not (params.is_finite() and labels.is_finite()):
        worst = max(float(np.nanmax(np.abs(g))) if g.size else 0.0 for g in grad.arrays())
        raise NumericalError(
            f"non-finite parameters after update (epoch {epoch}, minibatch {minibatch}, "
            f"max |grad| = {worst:.4g})"
        )
    return params, labels


@dataclass
class EpochRecord:
    epoch: int
    recon_error: float
    mean_hidden_activation: float
    wall_time: float


def infer_dims(cases, config, num_visible=None, K=5):
    variant = config.model_variant
    n_blocks = len(BLOCK_NAMES[variant])
    if num_visible is None:
        num_visible = int(max(c.units.max() for c in cases if len(c))) + 1
    sizes = tuple(int(cases[0].labels[b].shape[0]) for b in range(n_blocks))
    return ModelDims(num_visible, config.hidden_units, K, variant, sizes)


def _split(n, parts):
    return [chunk for chunk in np.array_split(np.arange(n), parts) if chunk.size]


def train(cases, config, dims=None, on_epoch=None):
    """Train from a seeded initialisation; returns ``(params, labels, log)``.

    ``on_epoch`` is called with each :class:`EpochRecord` as it is produced.
    With ``config.threads == 1`` runs are bit-reproducible.
    """
    if not cases:
        raise ValueError("no training cases")
    if dims is None:
        dims = infer_dims(cases, config)
    params, labels = init_params(dims, cases, config.seed, config.init_scale)
    velocity = GradientAccumulator.zeros(params, labels)
    n_blocks = len(labels.sizes)
    T = config.cd_steps
    lam, rho = config.effective_sparsity_weight, config.sparsity_target
    records = []
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = np.random.default_rng([config.seed, _SHUFFLE_STREAM, epoch]).permutation(len(cases))
            momentum = config.momentum_at(epoch)
            recon_total, n_total, act_total, act_count = 0.0, 0, 0.0, 0
            for mb, begin in enumerate(range(0, len(cases), config.minibatch_size)):
                ids = order[begin:begin + config.minibatch_size]
                batch = pack_cases([cases[i] for i in ids], ids, n_blocks)
                rngs = [chain_rng(config.seed, epoch, int(i)) for i in ids]
                noise = draw_batch_noise(batch, dims.num_hidden, T, rngs)
                grad, stats = _run_batch(params, labels, batch, T, noise, pool, config.threads)
                if lam:
                    d_hid, dW = sparsity_gradient(stats.hidden_probs, rho, lam,
                                                  stats.visible_counts / batch.size)
                    grad.d_hid_bias += batch.size * d_hid
                    grad.dW += batch.size * dW
                apply_update(params, labels, grad, config, velocity, momentum, epoch=epoch, minibatch=mb)
                recon_total += stats.recon_abs_error
                n_total += stats.n_ratings
                act_total += float(stats.hidden_probs.sum())
                act_count += stats.hidden_probs.size
            record = EpochRecord(epoch, recon_total / max(n_total, 1), act_total / max(act_count, 1),
                                 time.perf_counter() - start)
            records.append(record)
            log.debug("epoch %d recon %.4f act %.4f", epoch, record.recon_error,
                      record.mean_hidden_activation)
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, labels, records


def _slice_batch(batch, noise, idx):
    lo, hi = batch.indptr[idx[0]], batch.indptr[idx[-1] + 1]
    sub = CaseBatch(batch.case_ids[idx], batch.indptr[idx[0]:idx[-1] + 2] - lo,
                    batch.rows[lo:hi] - idx[0], batch.units[lo:hi], batch.levels[lo:hi],
                    [q[idx] for q in batch.labels])
    sel = (noise.label_case >= idx[0]) & (noise.label_case <= idx[-1])
    sub_noise = ChainNoise(noise.hidden[:, idx], noise.visible[:, lo:hi], noise.labels[:, sel],
                           noise.label_case[sel] - idx[0], noise.label_block[sel])
    return sub, sub_noise


def _run_batch(params, labels, batch, T, noise, pool, threads):
    if pool is None:
        return cd_batch(params, labels, batch, T, noise)
    chunks = _split(batch.size, threads)
    jobs = []
    for c in chunks:
        sub, sub_noise = _slice_batch(batch, noise, c)
        jobs.append(pool.submit(cd_batch, params, labels, sub, T, sub_noise))
    results = [j.result() for j in jobs]
    grad = results[0][0]
    for g, _ in results[1:]:
        grad.merge(g)
    stats = BatchStats(
        np.concatenate([s.hidden_probs for _, s in results]),
        sum(s.visible_counts for _, s in results),
        sum(s.recon_abs_error for _, s in results),
        sum(s.n_ratings for _, s in results),
    )
    return grad, stats

