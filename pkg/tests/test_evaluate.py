import json

import numpy as np
import pytest
from conftest import write_ml100k

from lcrbm import oracle
from lcrbm.checks import random_case, random_model
from lcrbm.dataset import FoldSplit, make_folds, parse_100k
from lcrbm.evaluate import (
    EvalReport,
    FoldResult,
    baseline_item_mean,
    baseline_report,
    format_table,
    mae,
    predict,
    predict_cold,
    predict_many,
    rmse,
    run_cv,
    score_unnormalized,
)
from lcrbm.rbm import LabelLayers, RbmParams, TrainingCase
from lcrbm.training import TrainConfig

NONE = LabelLayers("none", [], [])


def zero_params(m=3, K=5, F=4):
    return RbmParams(np.zeros((F, m, K)), np.zeros((m, K)), np.zeros(F))


# -- scores and predictions ---------------------------------------------------------

def test_zero_params_scores_equal():
    params = zero_params()
    case = TrainingCase([0], [4])
    scores = [score_unnormalized(params, NONE, case, 2, k) for k in range(1, 6)]
    assert np.allclose(scores, scores[0])


def test_zero_params_prediction_uniform():
    pred = predict(zero_params(), NONE, TrainingCase([0, 1], [5, 1]), 2)
    assert np.allclose(pred.distribution, 0.2)
    assert pred.expected_rating == pytest.approx(3.0)
    assert pred.argmax_rating == 1  # ties break to the lower level


@pytest.mark.parametrize("variant", ["none", "item", "user"])
def test_scores_softmax_to_enumerated_conditional(variant):
    rng = np.random.default_rng(21)
    params, labels = random_model(rng, variant, m=3, K=3, F=3)
    full = random_case(rng, params, labels)
    case = TrainingCase(full.units[:2], full.ratings[:2], full.labels)
    scores = np.array([score_unnormalized(params, labels, case, 2, k) for k in (1, 2, 3)])
    dist = np.exp(scores - scores.max())
    dist /= dist.sum()
    exact = oracle.exact_predictive(params, labels, case, 2)
    assert np.abs(dist - exact).max() < 1e-9
    assert np.abs(predict(params, labels, case, 2).distribution - exact).max() < 1e-9


def test_argmax_invariant_to_common_shift():
    rng = np.random.default_rng(2)
    params, labels = random_model(rng, "item", m=3, K=3, F=3)
    case = random_case(rng, params, labels, n_units=2)
    query = int(np.setdiff1d(np.arange(3), case.units)[0])
    before = predict(params, labels, case, query)
    params.vis_bias[query] += 7.5
    after = predict(params, labels, case, query)
    assert before.argmax_rating == after.argmax_rating
    assert np.allclose(before.distribution, after.distribution, atol=1e-12)


def test_query_unit_in_case_is_excluded():
    rng = np.random.default_rng(3)
    params, labels = random_model(rng, "none", m=3, K=3, F=2)
    case = TrainingCase([0, 1, 2], [1, 2, 3])
    a = predict(params, labels, case, 1).distribution
    b = predict(params, labels, TrainingCase([0, 2], [1, 3]), 1).distribution
    assert np.array_equal(a, b)


def test_prediction_properties():
    rng = np.random.default_rng(4)
    for _ in range(20):
        params, labels = random_model(rng, "user", m=3, K=5, F=3, scale=3.0)
        pred = predict(params, labels, random_case(rng, params, labels, n_units=2), 0)
        assert abs(pred.distribution.sum() - 1) < 1e-9
        assert 1 <= pred.expected_rating <= 5
        assert pred.expected_rating == pytest.approx(pred.distribution @ np.arange(1, 6))


def test_cold_start_uses_visible_bias():
    params = zero_params()
    params.vis_bias[1] = [0, 1, 2, 3, 4]
    pred = predict_cold(params, 1)
    expected = np.exp(np.arange(5)) / np.exp(np.arange(5)).sum()
    assert np.allclose(pred.distribution, expected)
    empty = predict(params, NONE, TrainingCase([], []), 1)
    assert np.allclose(empty.distribution, expected)


def test_predict_many_matches_predict():
    rng = np.random.default_rng(5)
    params, labels = random_model(rng, "user", m=6, K=5, F=4)
    hot = random_case(rng, params, labels).labels
    cases = {0: TrainingCase([1, 2, 3], [5, 1, 2], hot), 2: TrainingCase([1, 2, 5], [3, 3, 4], hot)}
    owners = np.array([0, 2, 2, 1])
    queries = np.array([5, 0, 3, 4])
    dist, cold = predict_many(params, labels, cases, owners, queries, chunk=3)
    assert cold.tolist() == [False, False, False, True]
    for row, (o, q) in enumerate(zip(owners, queries)):
        ref = predict_cold(params, q) if o not in cases else predict(params, labels, cases[o], q)
        assert np.abs(dist[row] - ref.distribution).max() < 1e-12


# -- metrics ----------------------------------------------------------------------------

def test_metric_examples():
    assert (mae([3, 4], [3, 4]), rmse([3, 4], [3, 4])) == (0.0, 0.0)
    assert (mae([3, 3], [1, 5]), rmse([3, 3], [1, 5])) == (2.0, 2.0)
    assert mae([1, 4], [2, 2]) == 1.5
    assert rmse([1, 4], [2, 2]) == pytest.approx(np.sqrt(2.5))


def test_metrics_reject_empty():
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])


# -- harness --------------------------------------------------------------------------

def small_config(**kw):
    return TrainConfig(**{"epochs": 3, "hidden_units": 5, "minibatch_size": 5, "seed": 0, **kw})


def test_one_fold_fixture_report(tmp_path):
    rows = [(10, 20, 3, 1), (10, 21, 4, 2), (10, 22, 5, 3), (11, 20, 2, 4), (11, 21, 1, 5),
            (11, 22, 3, 6), (12, 20, 5, 7), (12, 21, 4, 8), (12, 22, 2, 9), (11, 23, 4, 10)]
    items = [(20, (0, 1, 1)), (21, (0, 0, 1)), (22, (1, 0, 0)), (23, (0, 1, 0))]
    ds = parse_100k(write_ml100k(tmp_path / "d", rows, items=items))
    assert len(ds) == 10
    split = make_folds(ds, 5, seed=0)[0]
    for variant in ("plain", "item", "user"):
        report = run_cv([split], small_config(variant=variant))
        assert len(report.folds) == 1 and report.folds[0].n_test == 2
        assert report.mae <= report.rmse
        payload = json.loads(report.payload_json())
        assert payload["folds"][0]["fold"] == 1 and "timing" not in payload


def test_cv_on_synthetic_data(synthetic100k):
    folds = make_folds(parse_100k(synthetic100k), 5, seed=3)
    report = run_cv(folds, small_config(variant="item", epochs=5), dataset_id="synthetic")
    assert len(report.folds) == 5
    for f in report.folds:
        assert f.mae <= f.rmse and 1 <= f.seed
    assert report.mae == pytest.approx(np.mean([f.mae for f in report.folds]))
    assert report.pooled_mae == pytest.approx(sum(f.abs_error_sum for f in report.folds) / sum(f.n_test for f in report.folds))


def test_cv_is_deterministic(synthetic100k):
    folds = make_folds(parse_100k(synthetic100k), 5, seed=3)[:2]
    cfg = small_config(variant="user", sparse=True)
    assert run_cv(folds, cfg).payload_json() == run_cv(folds, cfg).payload_json()


def test_global_mean_fallback(tmp_path):
    rows = [(10, 20, 3, 1), (10, 21, 5, 2), (11, 21, 4, 3), (12, 22, 2, 4)]
    ds = parse_100k(write_ml100k(tmp_path / "d", rows))
    train = ds.subset(np.array([0, 1, 2]))
    test = ds.subset(np.array([3]))  # user 12 and item 22 never seen in train
    report = run_cv([FoldSplit(1, train, test)], small_config())
    fold = report.folds[0]
    assert fold.n_global_fallback == 1
    assert fold.mae == pytest.approx(abs(4.0 - 2))


def test_baseline_constant_ratings(tmp_path):
    rows = [(u, i, 3, 0) for u in (10, 11, 12) for i in (20, 21, 22)]
    ds = parse_100k(write_ml100k(tmp_path / "d", rows))
    report = baseline_report(make_folds(ds, 3, seed=0), "constant")
    assert report.mae == 0.0 and report.rmse == 0.0 and len(report.folds) == 3


def test_baseline_unseen_item_uses_global_mean(tmp_path):
    rows = [(10, 20, 2, 1), (11, 20, 4, 2), (12, 21, 5, 3)]
    ds = parse_100k(write_ml100k(tmp_path / "d", rows))
    result = baseline_item_mean(FoldSplit(1, ds.subset(np.array([0, 1])), ds.subset(np.array([2]))))
    assert result.mae == pytest.approx(2.0) and result.n_global_fallback == 1


def test_baseline_on_fold_one(ml100k_folds):
    result = baseline_item_mean(ml100k_folds[0])
    assert 0.81 <= result.mae <= 0.84


def test_report_table_layout():
    reports = []
    for name, m in (("LC-RBM (Item)", 0.75), ("RBM", 0.8)):
        r = EvalReport(name, "100K", {}, 0)
        r.folds = [FoldResult(1, m, m + 0.2, 10, 0)]
        reports.append(r)
    table = format_table(reports)
    lines = table.splitlines()
    assert "100K" in lines[0] and "MAE" in lines[1] and "RMSE" in lines[1]
    assert lines[3].startswith("LC-RBM (Item)") and "0.7500" in lines[3] and "0.9500" in lines[3]
