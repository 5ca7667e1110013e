"""Randomised oracle checks: closed forms versus brute-force enumeration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .evaluate import predict
from .rbm import (
    BLOCK_NAMES,
    LabelLayers,
    RbmParams,
    TrainingCase,
    energy,
    hidden_given_visible,
    label_given_hidden,
    visible_given_hidden,
)
from .training import cd_batch, chain_rng, draw_batch_noise, pack_cases

TINY_LABEL_SIZES = {"none": (), "item": (2,), "user": (2, 2, 2)}
CONDITIONAL_TOL = 1e-9
GRADIENT_TOL = 2e-2


@dataclass
class CheckResult:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} residual={self.residual:.3e}  tol={self.tolerance:.1e}"


def random_model(rng, variant="none", m=3, K=3, F=3, scale=1.0, label_sizes=None):
    sizes = TINY_LABEL_SIZES[variant] if label_sizes is None else tuple(label_sizes)
    params = RbmParams(rng.normal(0, scale, (F, m, K)), rng.normal(0, scale, (m, K)),
                       rng.normal(0, scale, F))
    labels = LabelLayers(variant, [rng.normal(0, scale, (F, s)) for s in sizes],
                         [rng.normal(0, scale, s) for s in sizes])
    return params, labels


def random_case(rng, params, labels, n_units=None, sizes=None):
    m, K = params.num_visible, params.K
    n = m if n_units is None else n_units
    units = np.sort(rng.choice(m, size=n, replace=False))
    ratings = rng.integers(1, K + 1, size=n)
    sizes = labels.sizes if sizes is None else sizes
    hot = []
    for s in sizes:
        q = np.zeros(s)
        q[rng.integers(s)] = 1.0
        hot.append(q)
    return TrainingCase(units, ratings, tuple(hot))


def _dims(rng, max_dims):
    m_max, K_max, F_max = max_dims
    return int(rng.integers(1, m_max + 1)), int(rng.integers(2, K_max + 1)), int(rng.integers(1, F_max + 1))


def _binary(rng, F):
    return rng.integers(0, 2, size=F).astype(np.float64)


def check_hidden_conditional(rng, variant, draws, max_dims=(3, 3, 3), scale=1.0):
    worst = 0.0
    for _ in range(draws):
        m, K, F = _dims(rng, max_dims)
        params, labels = random_model(rng, variant, m, K, F, scale)
        case = random_case(rng, params, labels, n_units=int(rng.integers(0, m + 1)))
        exact = oracle.exact_hidden_conditional(params, labels, case)
        worst = max(worst, float(np.abs(hidden_given_visible(params, labels, case) - exact).max()))
    return CheckResult(f"hidden|visible [{variant}]", worst, CONDITIONAL_TOL)


def check_visible_conditional(rng, variant, draws, max_dims=(3, 3, 3), scale=1.0):
    worst = 0.0
    for _ in range(draws):
        m, K, F = _dims(rng, max_dims)
        params, labels = random_model(rng, variant, m, K, F, scale)
        h = _binary(rng, F)
        units = np.arange(m)
        exact = oracle.exact_visible_conditional(params, labels, h, units)
        worst = max(worst, float(np.abs(visible_given_hidden(params, h, units) - exact).max()))
    return CheckResult(f"visible|hidden [{variant}]", worst, CONDITIONAL_TOL)


def check_label_conditional(rng, variant, draws, max_dims=(3, 3, 3), scale=1.0):
    worst = 0.0
    for _ in range(draws):
        m, K, F = _dims(rng, max_dims)
        params, labels = random_model(rng, variant, m, K, F, scale)
        h = _binary(rng, F)
        exact = oracle.exact_label_conditional(params, labels, h, units=np.arange(min(m, 1)))
        closed = label_given_hidden(labels, h)
        worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(closed, exact)))
    return CheckResult(f"label|hidden [{variant}] ({'/'.join(BLOCK_NAMES[variant])})", worst,
                       CONDITIONAL_TOL)


def check_energy_consistency(rng, variant, draws, max_dims=(3, 3, 3), scale=1.0):
    """p(h_j=1 | rest) from the enumerated joint equals sigma(E(h_j=0) - E(h_j=1))."""
    worst = 0.0
    for _ in range(draws):
        m, K, F = _dims(rng, max_dims)
        params, labels = random_model(rng, variant, m, K, F, scale)
        case = random_case(rng, params, labels)
        h = _binary(rng, F)
        j = int(rng.integers(F))
        h1, h0 = h.copy(), h.copy()
        h1[j], h0[j] = 1.0, 0.0
        p1 = oracle.exact_joint_probability(params, labels, case, h1)
        p0 = oracle.exact_joint_probability(params, labels, case, h0)
        from_energy = 1.0 / (1.0 + np.exp(energy(params, labels, case, h1) - energy(params, labels, case, h0)))
        worst = max(worst, abs(p1 / (p0 + p1) - from_energy))
    return CheckResult(f"energy/joint consistency [{variant}]", worst, CONDITIONAL_TOL)


def check_prediction(rng, variant, draws, max_dims=(3, 3, 3), scale=1.0):
    worst = 0.0
    for _ in range(draws):
        m, K, F = _dims(rng, max_dims)
        params, labels = random_model(rng, variant, m, K, F, scale)
        query = int(rng.integers(m))
        others = np.setdiff1d(np.arange(m), [query])
        n_obs = int(rng.integers(0, others.size + 1))
        obs = np.sort(rng.choice(others, size=n_obs, replace=False))
        base = random_case(rng, params, labels)
        case = TrainingCase(obs, rng.integers(1, K + 1, size=n_obs), base.labels)
        exact = oracle.exact_predictive(params, labels, case, query)
        dist = predict(params, labels, case, query).distribution
        worst = max(worst, float(np.abs(dist - exact).max()))
    return CheckResult(f"prediction [{variant}]", worst, CONDITIONAL_TOL)


def check_log_partition_orders(rng, variant, draws, max_dims=(3, 3, 3), scale=1.0):
    worst = 0.0
    for _ in range(draws):
        m, K, F = _dims(rng, max_dims)
        params, labels = random_model(rng, variant, m, K, F, scale)
        table = oracle.enumerate_joint(params, labels)
        worst = max(worst, abs(table.log_partition() - table.log_partition_reordered()))
    return CheckResult(f"log-partition summation orders [{variant}]", worst, CONDITIONAL_TOL)


def mc_cd_gradient(params, labels, case, T, chains, seed, batch=20000):
    """Mean CD-T gradient over ``chains`` independent seeded chains of one case."""
    total = None
    n_blocks = len(labels.sizes)
    for lo in range(0, chains, batch):
        ids = np.arange(lo, min(lo + batch, chains))
        packed = pack_cases([case] * ids.size, ids, n_blocks)
        noise = draw_batch_noise(packed, params.num_hidden, T, [chain_rng(seed, 0, int(i)) for i in ids])
        grad, _ = cd_batch(params, labels, packed, T, noise)
        total = grad if total is None else total.merge(grad)
    return total.scaled(1.0 / total.case_count)


def gradient_residual(params, labels, case, T=50, chains=100000, seed=0):
    approx = mc_cd_gradient(params, labels, case, T, chains, seed)
    exact = oracle.exact_gradient(params, labels, case)
    return max(float(np.abs(a - b).max()) for a, b in zip(approx.arrays(), exact.arrays()))


def check_cd_gradient(rng, variant, T=50, chains=100000, dims=(2, 2, 2)):
    m, K, F = dims
    params, labels = random_model(rng, variant, m, K, F, scale=0.5)
    case = random_case(rng, params, labels)
    residual = gradient_residual(params, labels, case, T, chains, seed=int(rng.integers(2**31)))
    return CheckResult(f"CD-{T} vs exact gradient [{variant}]", residual, GRADIENT_TOL)


def run_suite(draws=100, max_dims=(3, 3, 3), seed=0, gradient=True, chains=100000, T=50, scale=1.0):
    rng = np.random.default_rng(seed)
    results = []
    for variant in ("none", "item", "user"):
        results.append(check_hidden_conditional(rng, variant, draws, max_dims, scale))
        results.append(check_visible_conditional(rng, variant, draws, max_dims, scale))
        if variant != "none":
            results.append(check_label_conditional(rng, variant, draws, max_dims, scale))
        results.append(check_energy_consistency(rng, variant, draws, max_dims, scale))
        results.append(check_prediction(rng, variant, draws, max_dims, scale))
        results.append(check_log_partition_orders(rng, variant, max(1, draws // 10), max_dims, scale))
    if gradient:
        for variant in ("none", "item", "user"):
            results.append(check_cd_gradient(rng, variant, T, chains))
    return results
