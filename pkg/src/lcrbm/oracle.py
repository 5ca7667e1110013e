"""Brute-force inference for tiny models.

Every quantity here comes from explicitly enumerating the joint table of
``-E(V, labels, h)`` over all visible levels, one-hot label states and
binary hidden vectors.  Nothing in this module calls the closed-form
conditionals it is used to check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .training import GradientAccumulator

ENUMERATION_BUDGET = 10**7


class EnumerationBudgetError(ValueError):
    pass


@dataclass
class JointTable:
    units: np.ndarray
    visible: np.ndarray  # (nV, n_units) 0-based levels
    label_states: np.ndarray  # (nL, n_blocks) hot index per block
    hidden: np.ndarray  # (nH, F) 0/1
    neg_energy: np.ndarray  # (nV, nL, nH)
    K: int
    label_sizes: tuple

    def log_partition(self):
        return float(logsumexp(self.neg_energy))

    def log_partition_reordered(self):
        """Same sum, hidden-first then labels then visible."""
        over_h = logsumexp(self.neg_energy, axis=2)
        over_l = logsumexp(over_h, axis=1)
        return float(logsumexp(over_l))

    def probabilities(self):
        return np.exp(self.neg_energy - self.log_partition())

    def visible_index(self, levels):
        """Row of ``visible`` matching 0-based ``levels`` (ordered as ``units``)."""
        idx = 0
        for lv in levels:
            idx = idx * self.K + int(lv)
        return idx

    def label_index(self, hot):
        idx = 0
        for h, s in zip(hot, self.label_sizes):
            idx = idx * s + int(h)
        return idx

    def hidden_index(self, h):
        idx = 0
        for v in h:
            idx = idx * 2 + int(v)
        return idx


def _grid(axes):
    """Cartesian product as an (n_states, n_axes) array; one empty row when there are no axes."""
    if not axes:
        return np.zeros((1, 0))
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


def enumerate_joint(params, labels, units=None, budget=ENUMERATION_BUDGET):
    """Tabulate ``-E`` for the sub-model over ``units`` (default: every unit)."""
    F, m, K = params.W.shape
    units = np.arange(m) if units is None else np.asarray(units, dtype=np.int64)
    sizes = labels.sizes if labels.active else ()
    n_states = K ** units.size * 2 ** F * int(np.prod(sizes, dtype=np.int64))
    if n_states > budget:
        raise EnumerationBudgetError(f"{n_states} joint states exceed the budget of {budget}")

    visible = _grid([range(K)] * units.size).astype(np.int64)
    hidden = _grid([(0.0, 1.0)] * F).astype(np.float64)
    label_states = _grid([range(s) for s in sizes]).astype(np.int64)

    # -E = h.W.V + vis_bias.V + hid_bias.h + sum_b (c_b.Q_b + h.U_b.Q_b)
    wsum = np.zeros((visible.shape[0], F))
    vsum = np.zeros(visible.shape[0])
    for col, unit in enumerate(units):
        wsum += params.W[:, unit, visible[:, col]].T
        vsum += params.vis_bias[unit, visible[:, col]]
    lsum = np.zeros(label_states.shape[0])
    lw = np.zeros((label_states.shape[0], F))
    for b, (w, c) in enumerate(zip(labels.weights, labels.biases)):
        lsum += c[label_states[:, b]]
        lw += w[:, label_states[:, b]].T
    neg = (
        (wsum @ hidden.T)[:, None, :]
        + vsum[:, None, None]
        + (hidden @ params.hid_bias)[None, None, :]
        + lsum[None, :, None]
        + (lw @ hidden.T)[None, :, :]
    )
    return JointTable(units, visible, label_states, hidden, neg, K, tuple(sizes))


def exact_log_partition(params, labels, units=None, budget=ENUMERATION_BUDGET):
    return enumerate_joint(params, labels, units, budget).log_partition()


def _case_indices(table, case, labels):
    order = {int(u): c for c, u in enumerate(table.units)}
    levels = np.zeros(table.units.size, dtype=np.int64)
    for u, r in zip(case.units, case.ratings):
        levels[order[int(u)]] = r - 1
    v = table.visible_index(levels)
    l_idx = table.label_index([int(np.argmax(q)) for q in case.labels]) if labels.active else 0
    return v, l_idx


def exact_hidden_conditional(params, labels, case):
    """p(h_j = 1 | V, labels) by normalising a slice of the joint table."""
    table = enumerate_joint(params, labels, case.units)
    v, l_idx = _case_indices(table, case, labels)
    logits = table.neg_energy[v, l_idx]
    p = np.exp(logits - logsumexp(logits))
    return p @ table.hidden


def exact_visible_conditional(params, labels, h, units):
    """p(V_i = k | h) for each unit in ``units``; labels fixed at state 0 (they are independent given h)."""
    table = enumerate_joint(params, labels, units)
    hi = table.hidden_index(h)
    logits = table.neg_energy[:, 0, hi]
    p = np.exp(logits - logsumexp(logits))
    K = params.K
    out = np.zeros((len(table.units), K))
    for col in range(len(table.units)):
        np.add.at(out[col], table.visible[:, col], p)
    return out


def exact_label_conditional(params, labels, h, units=()):
    table = enumerate_joint(params, labels, units)
    hi = table.hidden_index(h)
    logits = table.neg_energy[0, :, hi]
    p = np.exp(logits - logsumexp(logits))
    out = []
    for b, size in enumerate(labels.sizes):
        dist = np.zeros(size)
        np.add.at(dist, table.label_states[:, b], p)
        out.append(dist)
    return out


def exact_predictive(params, labels, case, query_unit):
    """p(V_query = k | observed ratings, labels) with hidden units summed out."""
    units = np.concatenate([case.units, [query_unit]])
    table = enumerate_joint(params, labels, units)
    l_idx = table.label_index([int(np.argmax(q)) for q in case.labels]) if labels.active else 0
    K = params.K
    base = np.asarray(case.ratings) - 1
    scores = np.empty(K)
    for k in range(K):
        v = table.visible_index(np.concatenate([base, [k]]))
        scores[k] = logsumexp(table.neg_energy[v, l_idx])
    return np.exp(scores - logsumexp(scores))


def exact_joint_probability(params, labels, case, h):
    table = enumerate_joint(params, labels, case.units)
    v, l_idx = _case_indices(table, case, labels)
    return float(np.exp(table.neg_energy[v, l_idx, table.hidden_index(h)] - table.log_partition()))


def exact_log_likelihood(params, labels, case):
    """log p(V, labels) of one case under its own sub-model."""
    table = enumerate_joint(params, labels, case.units)
    v, l_idx = _case_indices(table, case, labels)
    return float(logsumexp(table.neg_energy[v, l_idx]) - table.log_partition())


def exact_gradient(params, labels, case):
    """d log p(V, labels) / d(theta) by enumeration, as an accumulator of one case."""
    table = enumerate_joint(params, labels, case.units)
    v, l_idx = _case_indices(table, case, labels)
    grad = GradientAccumulator.zeros(params, labels)
    grad.case_count = 1
    H = table.hidden

    logits = table.neg_energy[v, l_idx]
    p_h = np.exp(logits - logsumexp(logits))
    eh_data = p_h @ H
    for u, r in zip(case.units, case.ratings):
        grad.dW[:, u, r - 1] += eh_data
        grad.d_vis_bias[u, r - 1] += 1.0
    grad.d_hid_bias += eh_data
    if labels.active:
        for b, q in enumerate(case.labels):
            grad.d_label_weights[b] += np.outer(eh_data, q)
            grad.d_label_biases[b] += q

    P = table.probabilities()
    p_v = P.sum(axis=(1, 2))
    p_l = P.sum(axis=(0, 2))
    eh_given_v = P.sum(axis=1) @ H  # (nV, F): sum_h p(v, h) h
    eh_given_l = P.sum(axis=0) @ H  # (nL, F)
    grad.d_hid_bias -= P.sum(axis=(0, 1)) @ H
    for col, u in enumerate(table.units):
        for k in range(params.K):
            mask = table.visible[:, col] == k
            grad.dW[:, u, k] -= eh_given_v[mask].sum(axis=0)
            grad.d_vis_bias[u, k] -= p_v[mask].sum()
    if labels.active:
        for b, size in enumerate(labels.sizes):
            for s in range(size):
                mask = table.label_states[:, b] == s
                grad.d_label_weights[b][:, s] -= eh_given_l[mask].sum(axis=0)
                grad.d_label_biases[b][s] -= p_l[mask].sum()
    return grad
