import numpy as np
import pytest

from lcrbm import oracle
from lcrbm.checks import random_case, random_model
from lcrbm.rbm import LabelLayers, ModelDims, RbmParams, TrainingCase, init_params
from lcrbm.training import (
    GradientAccumulator,
    NumericalError,
    TrainConfig,
    apply_update,
    cd_gradient,
    sparsity_gradient,
    train,
)

NONE = LabelLayers("none", [], [])


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


# -- config ---------------------------------------------------------------------

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.hidden_units, cfg.cd_steps) == (0.0005, 100, 100, 1)
    assert (cfg.minibatch_size, cfg.weight_decay) == (100, 0.0002)
    assert cfg.momentum_at(1) == 0.5 and cfg.momentum_at(5) == 0.5 and cfg.momentum_at(6) == 0.9
    assert cfg.effective_sparsity_weight == 0.0
    assert TrainConfig(sparse=True).effective_sparsity_weight == 0.01
    assert TrainConfig(variant="item", sparse=True).effective_sparsity_weight == 0.01
    assert TrainConfig(variant="user", sparse=True).effective_sparsity_weight == 0.05
    assert TrainConfig(variant="user", sparse=True, sparsity_weight=0.2).effective_sparsity_weight == 0.2


@pytest.mark.parametrize("bad", [{"learning_rate": 0}, {"cd_steps": 0}, {"sparsity_target": 1.0},
                                 {"variant": "movie"}])
def test_config_rejects_invalid(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_round_trip():
    cfg = TrainConfig(variant="user", sparse=True, seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rte": 0.1})


# -- CD gradient ------------------------------------------------------------------

def test_cd_gradient_fixed_point():
    F, m, K = 2, 3, 3
    ratings = np.array([2, 3, 1])
    W = np.full((F, m, K), -30.0)
    for i, k in enumerate(ratings):
        W[:, i, k - 1] = 30.0
    params = RbmParams(W, np.zeros((m, K)), np.full(F, 0.0))
    sizes = (2,)
    labels = LabelLayers("item", [np.tile([30.0, -30.0], (F, 1))], [np.zeros(2)])
    case = TrainingCase(np.arange(m), ratings, (np.array([1.0, 0.0]),))
    grad = cd_gradient(params, labels, case, 3, np.random.default_rng(0))
    assert grad.case_count == 1 and sizes == labels.sizes
    for g in grad.arrays():
        assert np.abs(g).max() < 1e-6


def test_cd_gradient_hand_replay():
    params = RbmParams(np.array([[[0.3, -0.4, 0.8]]]), np.array([[0.1, 0.2, -0.3]]), np.array([0.05]))
    case = TrainingCase([0], [2])
    grad = cd_gradient(params, NONE, case, 1, np.random.default_rng(5))

    rng = np.random.default_rng(5)
    u_hid, u_vis = rng.random((1, 1)), rng.random((1, 1))
    p0 = sig(0.05 - 0.4)
    h = float(u_hid[0, 0] < p0)
    logits = params.vis_bias[0] + h * params.W[0, 0]
    cdf = np.cumsum(np.exp(logits) / np.exp(logits).sum())
    k_new = int((cdf < u_vis[0, 0]).sum())
    p1 = sig(0.05 + params.W[0, 0, k_new])

    expected = np.zeros((1, 1, 3))
    expected[0, 0, 1] += p0
    expected[0, 0, k_new] -= p1
    assert np.allclose(grad.dW, expected, atol=1e-15)
    assert grad.d_hid_bias[0] == pytest.approx(p0 - p1)
    vb = np.zeros((1, 3))
    vb[0, 1] += 1
    vb[0, k_new] -= 1
    assert np.array_equal(grad.d_vis_bias, vb)


def test_cd_gradient_positive_phase_deterministic():
    rng = np.random.default_rng(0)
    params, labels = random_model(rng, "user", m=3, K=3, F=4)
    case = random_case(rng, params, labels)
    a = cd_gradient(params, labels, case, 1, np.random.default_rng(1))
    b = cd_gradient(params, labels, case, 1, np.random.default_rng(1))
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    # label gradients come from one-hot draws: each block's bias gradient sums to zero
    for g in a.d_label_biases:
        assert abs(g.sum()) < 1e-12


def test_accumulator_shapes_and_reset():
    rng = np.random.default_rng(0)
    params, labels = random_model(rng, "user", m=3, K=2, F=2)
    acc = GradientAccumulator.zeros(params, labels)
    shapes = [a.shape for a in acc.arrays()]
    assert shapes == [(2, 3, 2), (3, 2), (2,), (2, 2), (2, 2), (2, 2), (2,), (2,), (2,)]
    acc.merge(cd_gradient(params, labels, random_case(rng, params, labels), 1, rng))
    assert acc.case_count == 1
    acc.reset()
    assert acc.case_count == 0 and all(np.all(a == 0) for a in acc.arrays())


# -- sparsity ----------------------------------------------------------------------

def test_sparsity_target_met():
    d_hid, dW = sparsity_gradient(np.full((4, 3), 0.05), 0.05, 0.01, np.ones((2, 2)))
    assert np.allclose(d_hid, 0) and np.allclose(dW, 0)


def test_sparsity_saturated_unit():
    d_hid, _ = sparsity_gradient(np.ones((5, 1)), 0.05, 0.01)
    assert d_hid[0] == pytest.approx(-0.0095)


def test_sparsity_disabled():
    d_hid, dW = sparsity_gradient(np.random.default_rng(0).random((3, 4)), 0.05, 0.0, np.ones((2, 5)))
    assert np.all(d_hid == 0) and np.all(dW == 0)


def test_sparsity_rejects_bad_target():
    with pytest.raises(ValueError):
        sparsity_gradient(np.ones((1, 1)), 0.0, 0.01)


# -- update rule ----------------------------------------------------------------------

def _one_param_problem(momentum=0.0):
    params = RbmParams(np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros(1))
    grad = GradientAccumulator.zeros(params, NONE)
    grad.case_count = 1
    velocity = GradientAccumulator.zeros(params, NONE)
    cfg = TrainConfig(weight_decay=0.0)
    return params, grad, velocity, cfg


def test_update_zero_gradient():
    params, grad, velocity, cfg = _one_param_problem()
    apply_update(params, NONE, grad, cfg, velocity, momentum=0.9)
    assert params.W[0, 0, 0] == 0 and params.vis_bias[0, 0] == 0


def test_update_learning_rate_step():
    params, grad, velocity, cfg = _one_param_problem()
    grad.dW[0, 0, 0] = 1.0
    apply_update(params, NONE, grad, cfg, velocity, momentum=0.0)
    assert params.W[0, 0, 0] == pytest.approx(0.0005, abs=1e-15)


def test_update_momentum_unrolled():
    params, grad, velocity, cfg = _one_param_problem()
    grad.dW[0, 0, 0] = 1.0
    apply_update(params, NONE, grad, cfg, velocity, momentum=0.5)
    first = params.W[0, 0, 0]
    apply_update(params, NONE, grad, cfg, velocity, momentum=0.5)
    assert params.W[0, 0, 0] - first == pytest.approx(1.5 * first, rel=1e-12)


def test_update_decay_weights_only():
    params, grad, velocity, _ = _one_param_problem()
    params.W[:] = 2.0
    params.vis_bias[:] = 2.0
    cfg = TrainConfig(weight_decay=0.1)
    apply_update(params, NONE, grad, cfg, velocity, momentum=0.0)
    assert params.W[0, 0, 0] == pytest.approx(2.0 - 0.0005 * 0.1 * 2.0)
    assert params.vis_bias[0, 0] == 2.0


def test_update_mean_normalization():
    params, grad, velocity, _ = _one_param_problem()
    grad.dW[0, 0, 0] = 4.0
    grad.case_count = 4
    apply_update(params, NONE, grad, TrainConfig(weight_decay=0.0, grad_normalization="mean"),
                 velocity, momentum=0.0)
    assert params.W[0, 0, 0] == pytest.approx(0.0005)


def test_update_empty_and_non_finite():
    params, grad, velocity, cfg = _one_param_problem()
    grad.case_count = 0
    with pytest.raises(ValueError):
        apply_update(params, NONE, grad, cfg, velocity)
    grad.case_count = 1
    grad.dW[0, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="epoch 3, minibatch 7"):
        apply_update(params, NONE, grad, cfg, velocity, epoch=3, minibatch=7)


# -- training loop ------------------------------------------------------------------------

def toy_cases(n=40, m=6, seed=0, labels=False):
    rng = np.random.default_rng(seed)
    cases = []
    for c in range(n):
        units = np.sort(rng.choice(m, size=int(rng.integers(1, m + 1)), replace=False))
        hot = np.zeros(2)
        hot[c % 2] = 1
        ratings = np.where(units % 2 == c % 2, 5, 1)
        cases.append(TrainingCase(units, ratings, (hot,) if labels else (), owner=c))
    return cases


def test_train_zero_epochs_returns_init():
    cases = toy_cases()
    cfg = TrainConfig(epochs=0, hidden_units=4, seed=3)
    params, labels, log = train(cases, cfg)
    init, _ = init_params(ModelDims(6, 4, 5), cases, 3)
    assert log == [] and np.array_equal(params.W, init.W) and np.array_equal(params.vis_bias, init.vis_bias)


def test_train_bit_reproducible():
    cases = toy_cases(labels=True)
    cfg = TrainConfig(epochs=3, hidden_units=5, minibatch_size=7, variant="item", seed=11,
                      learning_rate=0.01)
    a, la, log_a = train(cases, cfg)
    b, lb, log_b = train(cases, cfg)
    assert np.array_equal(a.W, b.W) and np.array_equal(la.weights[0], lb.weights[0])
    assert [r.recon_error for r in log_a] == [r.recon_error for r in log_b]
    c, _, _ = train(cases, TrainConfig.from_dict({**cfg.to_dict(), "seed": 12}))
    assert not np.array_equal(a.W, c.W)


def test_train_log_records():
    seen = []
    cases = toy_cases()
    _, _, log = train(cases, TrainConfig(epochs=4, hidden_units=3, seed=0), on_epoch=seen.append)
    assert [r.epoch for r in log] == [1, 2, 3, 4] and seen == log
    assert all(0 <= r.mean_hidden_activation <= 1 and r.recon_error >= 0 for r in log)


def test_train_threads_match_single_thread():
    # chain noise is drawn per case, so splitting a minibatch across threads
    # changes only the floating-point summation order
    cases = toy_cases(n=60, labels=True)
    cfg = TrainConfig(epochs=3, hidden_units=6, minibatch_size=20, variant="item", seed=2,
                      learning_rate=0.01)
    a, _, _ = train(cases, cfg)
    b, _, _ = train(cases, TrainConfig.from_dict({**cfg.to_dict(), "threads": 3}))
    assert np.allclose(a.W, b.W, atol=1e-10)


def test_sparse_activation_closer_to_target():
    cases = toy_cases(n=100, m=8)
    base = dict(epochs=30, hidden_units=8, seed=1, minibatch_size=10, learning_rate=0.005)
    _, _, plain = train(cases, TrainConfig(**base))
    _, _, sparse = train(cases, TrainConfig(**base, sparse=True, sparsity_weight=0.1, sparsity_target=0.05))
    rho = 0.05
    assert abs(sparse[-1].mean_hidden_activation - rho) < abs(plain[-1].mean_hidden_activation - rho)


def test_train_raises_likelihood_on_tiny_model():
    cases = [TrainingCase([0, 1], [1, 2]), TrainingCase([0, 1], [2, 2]), TrainingCase([0, 1], [1, 2])]
    cfg = TrainConfig(epochs=200, hidden_units=2, seed=0, learning_rate=0.05, minibatch_size=3)
    init, _ = init_params(ModelDims(2, 2, 2), cases, 0, cfg.init_scale)
    params, labels, _ = train(cases, cfg, ModelDims(2, 2, 2))

    def loglik(p):
        return sum(oracle.exact_log_likelihood(p, NONE, c) for c in cases)

    assert loglik(params) > loglik(init)
