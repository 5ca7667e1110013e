"""Conditional RBM with softmax visible units and optional label layers.

Each training case (one user, or one movie) instantiates visible softmax
groups only for its observed ratings; the weight tensor is shared across
cases.  Label layers are extra observed softmax blocks wired to the hidden
units: a genre block for item cases, or occupation/age/gender blocks for
user cases.

Array conventions
-----------------
``W`` has shape ``(F, m, K)`` (hidden, visible group, rating level) but is
stored so that ``W.transpose(1, 2, 0)`` is C-contiguous; the batched
trainer gathers whole ``(K, F)`` slabs per visible group.  Ratings inside a
:class:`TrainingCase` are 1-based, as in the data files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

VARIANTS = ("none", "item", "user")
BLOCK_NAMES = {
    "none": (),
    "item": ("genre",),
    "user": ("occupation", "age", "gender"),
}
CHECKPOINT_VERSION = 1


def unit_major(W):
    """Return ``W`` with shape (F, m, K) laid out as a contiguous (m, K, F) array."""
    return np.ascontiguousarray(np.asarray(W, dtype=np.float64).transpose(1, 2, 0)).transpose(2, 0, 1)


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class RbmParams:
    W: np.ndarray
    vis_bias: np.ndarray
    hid_bias: np.ndarray

    def __post_init__(self):
        self.W = unit_major(self.W)
        self.vis_bias = np.ascontiguousarray(self.vis_bias, dtype=np.float64)
        self.hid_bias = np.ascontiguousarray(self.hid_bias, dtype=np.float64)
        F, m, K = self.W.shape
        if self.vis_bias.shape != (m, K) or self.hid_bias.shape != (F,):
            raise ValueError(
                f"inconsistent shapes: W {self.W.shape}, vis_bias {self.vis_bias.shape}, "
                f"hid_bias {self.hid_bias.shape}"
            )

    @property
    def num_hidden(self):
        return self.W.shape[0]

    @property
    def num_visible(self):
        return self.W.shape[1]

    @property
    def K(self):
        return self.W.shape[2]

    def copy(self):
        return RbmParams(self.W.copy(), self.vis_bias.copy(), self.hid_bias.copy())

    def is_finite(self):
        return bool(np.isfinite(self.W).all() and np.isfinite(self.vis_bias).all()
                    and np.isfinite(self.hid_bias).all())


@dataclass
class LabelLayers:
    """Label-block weights ``(F, size)`` and biases ``(size,)``.

    For ``variant="item"`` the single block is the genre layer (U, c).  For
    ``variant="user"`` the blocks are occupation (Z, d), age (X, e) and
    gender (Y, f), in that order.
    """

    variant: str = "none"
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown label variant {self.variant!r}")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        n_blocks = len(BLOCK_NAMES[self.variant])
        if len(self.weights) != n_blocks or len(self.biases) != n_blocks:
            raise ValueError(f"variant {self.variant!r} needs {n_blocks} label blocks")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"label block shapes disagree: {w.shape} vs {b.shape}")

    @property
    def names(self):
        return BLOCK_NAMES[self.variant]

    @property
    def sizes(self):
        return tuple(b.shape[0] for b in self.biases)

    @property
    def active(self):
        return self.variant != "none"

    def copy(self):
        return LabelLayers(self.variant, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def is_finite(self):
        return all(np.isfinite(a).all() for a in (*self.weights, *self.biases))


@dataclass(frozen=True)
class ModelDims:
    num_visible: int
    num_hidden: int
    K: int = 5
    variant: str = "none"
    label_sizes: tuple = ()

    def __post_init__(self):
        if len(self.label_sizes) != len(BLOCK_NAMES[self.variant]):
            raise ValueError(f"variant {self.variant!r} expects "
                             f"{len(BLOCK_NAMES[self.variant])} label sizes, got {self.label_sizes}")


@dataclass(frozen=True)
class TrainingCase:
    """Observed ratings of one user (or one movie) plus its label blocks.

    ``units`` are visible-group indices, ``ratings`` the observed levels in
    ``1..K``.  ``labels`` holds one 0/1 vector per label block; it may be
    present even when the model ignores labels.
    """

    units: np.ndarray
    ratings: np.ndarray
    labels: tuple = ()
    owner: int = -1

    def __post_init__(self):
        units = np.asarray(self.units, dtype=np.int64).reshape(-1)
        ratings = np.asarray(self.ratings, dtype=np.int64).reshape(-1)
        if units.shape != ratings.shape:
            raise ValueError("units and ratings differ in length")
        if np.unique(units).size != units.size:
            raise ValueError("visible indices in a case must be unique")
        if ratings.size and ratings.min() < 1:
            raise ValueError("ratings are 1-based levels")
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "ratings", ratings)
        object.__setattr__(self, "labels", tuple(np.asarray(q, dtype=np.float64) for q in self.labels))

    def __len__(self):
        return self.units.size

    def without(self, unit):
        """Copy of the case with ``unit`` removed from the observed set."""
        keep = self.units != unit
        return TrainingCase(self.units[keep], self.ratings[keep], self.labels, self.owner)


@dataclass
class HiddenState:
    probs: np.ndarray
    samples: np.ndarray


@dataclass
class GibbsSample:
    case: TrainingCase
    hidden: HiddenState
    labels: tuple


def _check_case(params, labels, case):
    if case.units.size and (case.units.max() >= params.num_visible or case.units.min() < 0):
        raise ValueError("case references a visible unit outside the model")
    if case.ratings.size and case.ratings.max() > params.K:
        raise ValueError(f"rating above K={params.K}")
    if labels.active:
        if len(case.labels) != len(labels.sizes):
            raise ValueError(f"case carries {len(case.labels)} label blocks, model expects "
                             f"{len(labels.sizes)}")
        for q, size in zip(case.labels, labels.sizes):
            if q.shape != (size,):
                raise ValueError(f"label block of length {q.shape} where {size} expected")


def label_input(labels, label_values):
    """Hidden input contributed by observed label blocks, shape (F,)."""
    total = 0.0
    for w, q in zip(labels.weights, label_values):
        total = total + w @ q
    return total


def hidden_input(params, labels, case):
    """Total input to each hidden unit given the case (before the sigmoid)."""
    _check_case(params, labels, case)
    x = params.hid_bias + params.W[:, case.units, case.ratings - 1].sum(axis=1)
    if labels.active:
        x = x + label_input(labels, case.labels)
    return x


def hidden_given_visible(params, labels, case):
    """p(h_j = 1 | observed ratings, labels) for every hidden unit.

    Unobserved visible groups contribute nothing.
    """
    return sigmoid(hidden_input(params, labels, case))


def visible_logits(params, h, units):
    units = np.asarray(units, dtype=np.int64)
    return params.vis_bias[units] + np.einsum("j,jik->ik", h, params.W[:, units, :])


def visible_given_hidden(params, h, unit):
    """Softmax over the K rating levels of one visible group (or an array of groups)."""
    h = np.asarray(h, dtype=np.float64)
    if np.ndim(unit) == 0:
        return softmax(visible_logits(params, h, [unit])[0])
    return softmax(visible_logits(params, h, unit), axis=-1)


def label_given_hidden(labels, h):
    """One softmax distribution per label block."""
    if not labels.active:
        raise ValueError("label_given_hidden needs a model with label layers")
    h = np.asarray(h, dtype=np.float64)
    return [softmax(b + h @ w) for w, b in zip(labels.weights, labels.biases)]


def energy(params, labels, case, h):
    """Energy of a joint configuration; sums run over the case's observed units only."""
    _check_case(params, labels, case)
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.num_hidden,):
        raise ValueError(f"hidden vector of shape {h.shape}, model has {params.num_hidden}")
    k = case.ratings - 1
    e = -(h @ params.W[:, case.units, k]).sum()
    e -= params.vis_bias[case.units, k].sum()
    e -= params.hid_bias @ h
    if labels.active:
        for w, b, q in zip(labels.weights, labels.biases, case.labels):
            e -= b @ q + h @ (w @ q)
    return float(e)


def sample_categorical(probs, u):
    """Inverse-CDF draw along the last axis; ``u`` are uniforms in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < np.expand_dims(u, -1) * cdf[..., -1:]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_label_block(probs, count, u):
    """Draw ``count`` categories from ``probs``; returns the count vector."""
    out = np.zeros(probs.shape[0])
    for v in u[:count]:
        out[sample_categorical(probs, v)] += 1.0
    return out


def label_draws(case_labels):
    return int(sum(round(q.sum()) for q in case_labels))


def gibbs_step(params, labels, case, h_in, rng):
    """One full Gibbs sweep h -> (V, labels) -> h on the case's observed units.

    Label blocks are resampled with the same number of active entries as
    the data (a single draw for one-hot blocks).
    """
    h_in = np.asarray(h_in, dtype=np.float64)
    if h_in.shape != (params.num_hidden,):
        raise ValueError("h_in has the wrong length")
    u_vis = rng.random(case.units.size)
    n_lab = label_draws(case.labels) if labels.active else 0
    u_lab = rng.random(n_lab)
    u_hid = rng.random(params.num_hidden)

    p_vis = visible_given_hidden(params, h_in, case.units) if case.units.size else np.zeros((0, params.K))
    new_ratings = sample_categorical(p_vis, u_vis) + 1
    new_labels = ()
    if labels.active:
        drawn = []
        offset = 0
        for p, q in zip(label_given_hidden(labels, h_in), case.labels):
            n = int(round(q.sum()))
            drawn.append(sample_label_block(p, n, u_lab[offset:offset + n]))
            offset += n
        new_labels = tuple(drawn)
    recon = TrainingCase(case.units, new_ratings, new_labels if labels.active else case.labels,
                         case.owner)
    probs = hidden_given_visible(params, labels, recon)
    return GibbsSample(recon, HiddenState(probs, (u_hid < probs).astype(np.float64)), new_labels)


def _log_frequencies(counts, axis=-1):
    counts = np.asarray(counts, dtype=np.float64) + 1.0
    return np.log(counts / counts.sum(axis=axis, keepdims=True))


def init_params(dims, cases, seed, weight_scale=0.01):
    """Seeded initialisation.

    Weights ~ N(0, weight_scale^2); hidden biases 0; visible biases are log
    Laplace-smoothed rating frequencies per unit; label biases are log
    smoothed label frequencies.
    """
    rng = np.random.default_rng([seed, 0])
    F, m, K = dims.num_hidden, dims.num_visible, dims.K
    W = rng.normal(0.0, weight_scale, size=(m, K, F)).transpose(2, 0, 1)
    counts = np.zeros((m, K))
    for case in cases:
        np.add.at(counts, (case.units, case.ratings - 1), 1.0)
    params = RbmParams(W, _log_frequencies(counts), np.zeros(F))

    weights, biases = [], []
    for b, size in enumerate(dims.label_sizes):
        weights.append(rng.normal(0.0, weight_scale, size=(F, size)))
        label_counts = np.zeros(size)
        for case in cases:
            label_counts += case.labels[b]
        biases.append(_log_frequencies(label_counts))
    return params, LabelLayers(dims.variant, weights, biases)


def dims_of(params, labels):
    return ModelDims(params.num_visible, params.num_hidden, params.K, labels.variant, labels.sizes)


def save_checkpoint(path, params, labels, *, seed, vocab=None, meta=None):
    """Write one self-describing ``.npz`` file (tensors row-major plus JSON header)."""
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": {"F": params.num_hidden, "m": params.num_visible, "K": params.K,
                 "label_sizes": list(labels.sizes)},
        "variant": labels.variant,
        "seed": int(seed),
        "vocab": vocab or {},
        "meta": meta or {},
    }
    arrays = {
        "W": np.ascontiguousarray(params.W),
        "vis_bias": params.vis_bias,
        "hid_bias": params.hid_bias,
    }
    for b, (w, c) in enumerate(zip(labels.weights, labels.biases)):
        arrays[f"label_weight_{b}"] = w
        arrays[f"label_bias_{b}"] = c
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = RbmParams(data["W"], data["vis_bias"], data["hid_bias"])
        n = len(header["dims"]["label_sizes"])
        labels = LabelLayers(header["variant"],
                             [data[f"label_weight_{b}"] for b in range(n)],
                             [data[f"label_bias_{b}"] for b in range(n)])
    return params, labels, header

