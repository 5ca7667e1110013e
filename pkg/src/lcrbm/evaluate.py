"""Rating prediction, MAE/RMSE, and the cross-validation harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .dataset import build_item_cases, build_user_cases
from .rbm import ModelDims, hidden_input, softplus
from .training import NumericalError, TrainConfig, train

log = logging.getLogger(__name__)

METHOD_ROWS = (
    ("LC-RBM (Item)", "item", False),
    ("Sparse LC-RBM (Item)", "item", True),
    ("LC-RBM (User)", "user", False),
    ("Sparse LC-RBM (User)", "user", True),
    ("RBM", "plain", False),
)


@dataclass
class Prediction:
    distribution: np.ndarray
    expected_rating: float
    argmax_rating: int


def _query_scores(params, x, query_unit):
    """log-domain scores for every level of ``query_unit`` given hidden input ``x``."""
    w = params.W[:, query_unit, :]  # (F, K)
    return params.vis_bias[query_unit] + softplus(x[:, None] + w).sum(axis=0)


def score_unnormalized(params, labels, case, query_unit, k):
    """Log of the product-form score for level ``k`` (1-based) of ``query_unit``.

    Equals ``vis_bias[q, k] + sum_j softplus(x_j + W[j, q, k])`` where ``x``
    is the hidden input from the case's observed ratings and labels.
    """
    if query_unit in set(case.units.tolist()):
        case = case.without(query_unit)
    return float(_query_scores(params, hidden_input(params, labels, case), query_unit)[k - 1])


def _to_prediction(dist):
    K = dist.shape[-1]
    levels = np.arange(1, K + 1)
    return Prediction(dist, float(dist @ levels), int(np.argmax(dist)) + 1)


def predict(params, labels, case, query_unit):
    """Exact p(V_query = k | observed ratings, labels), normalised over the K levels."""
    if query_unit in set(case.units.tolist()):
        case = case.without(query_unit)
    scores = _query_scores(params, hidden_input(params, labels, case), query_unit)
    return _to_prediction(np.exp(scores - logsumexp(scores)))


def predict_cold(params, query_unit):
    """Bias-only prediction used when the case has no training ratings."""
    return _to_prediction(softmax(params.vis_bias[query_unit]))


def predict_many(params, labels, cases, owners, query_units, chunk=4096):
    """Distributions for many (owner, query unit) pairs.

    ``cases`` maps owner index to its training case; owners without a case
    get the bias-only distribution.  Returns ``(dist, cold_mask)``.
    """
    owners = np.asarray(owners, dtype=np.int64)
    query_units = np.asarray(query_units, dtype=np.int64)
    F, m, K = params.W.shape
    known = sorted(cases)
    X = np.zeros((max(known, default=-1) + 1, F))
    for o in known:
        X[o] = hidden_input(params, labels, cases[o])
    cold = np.array([o not in cases for o in owners], dtype=bool)
    dist = np.empty((owners.size, K))
    Wum = params.W.transpose(1, 2, 0)  # (m, K, F)
    for lo in range(0, owners.size, chunk):
        sl = slice(lo, lo + chunk)
        warm = ~cold[sl]
        q = query_units[sl]
        scores = np.array(params.vis_bias[q])
        if warm.any():
            x = X[owners[sl][warm]]
            scores[warm] += softplus(x[:, None, :] + Wum[q[warm]]).sum(axis=2)
        dist[sl] = softmax(scores, axis=1)
    return dist, cold


def mae(predictions, truths):
    p, t = np.asarray(predictions, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("mae needs equal, non-empty inputs")
    return float(np.mean(np.abs(p - t)))


def rmse(predictions, truths):
    p, t = np.asarray(predictions, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("rmse needs equal, non-empty inputs")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class FoldResult:
    fold_index: int
    mae: float
    rmse: float
    n_test: int
    seed: int
    n_cold_case: int = 0
    n_global_fallback: int = 0
    abs_error_sum: float = 0.0
    sq_error_sum: float = 0.0
    wall_time: float = 0.0

    def payload(self):
        return {
            "fold": self.fold_index,
            "mae": self.mae,
            "rmse": self.rmse,
            "n_test": self.n_test,
            "seed": self.seed,
            "n_cold_case": self.n_cold_case,
            "n_global_fallback": self.n_global_fallback,
        }


@dataclass
class EvalReport:
    method: str
    dataset_id: str
    config: dict
    seed: int
    folds: list = field(default_factory=list)
    wall_time: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def mae(self):
        return float(np.mean([f.mae for f in self.folds]))

    @property
    def rmse(self):
        return float(np.mean([f.rmse for f in self.folds]))

    @property
    def pooled_mae(self):
        return sum(f.abs_error_sum for f in self.folds) / sum(f.n_test for f in self.folds)

    @property
    def pooled_rmse(self):
        return float(np.sqrt(sum(f.sq_error_sum for f in self.folds) / sum(f.n_test for f in self.folds)))

    def payload(self):
        """Deterministic part of the report (no timings)."""
        return {
            "method": self.method,
            "dataset": self.dataset_id,
            "seed": self.seed,
            "config": self.config,
            "folds": [f.payload() for f in self.folds],
            "aggregate": {"mae": self.mae, "rmse": self.rmse,
                          "pooled_mae": self.pooled_mae, "pooled_rmse": self.pooled_rmse},
            "notes": list(self.notes),
        }

    def payload_json(self):
        return json.dumps(self.payload(), sort_keys=True, indent=2)

    def to_json(self):
        body = self.payload()
        body["timing"] = {"wall_time": self.wall_time,
                          "folds": [f.wall_time for f in self.folds]}
        return json.dumps(body, sort_keys=True, indent=2)


def format_table(reports):
    """Plain-text table: one row per method, MAE/RMSE columns per dataset."""
    datasets = []
    for r in reports:
        if r.dataset_id not in datasets:
            datasets.append(r.dataset_id)
    rows = {}
    for r in reports:
        rows.setdefault(r.method, {})[r.dataset_id] = r
    name_w = max([len("Method")] + [len(m) for m in rows])
    col_w = 17
    head = "Method".ljust(name_w) + "".join(d.center(col_w) for d in datasets)
    sub = " " * name_w + "".join(("MAE".rjust(8) + "RMSE".rjust(9)) for _ in datasets)
    lines = [head, sub, "-" * len(sub)]
    for method, per in rows.items():
        cells = []
        for d in datasets:
            r = per.get(d)
            cells.append(f"{r.mae:8.4f}{r.rmse:9.4f}" if r else " " * col_w)
        lines.append(method.ljust(name_w) + "".join(cells))
    return "\n".join(lines) + "\n"


def method_name(config):
    for name, variant, sparse in METHOD_ROWS:
        if variant == config.variant and sparse == config.sparse:
            return name
    return f"{'Sparse ' if config.sparse else ''}{config.variant} RBM"


def fold_seed(seed, fold_index):
    return int(np.random.SeedSequence([seed, fold_index]).generate_state(1)[0])


def cases_for(config, split):
    if config.variant == "item":
        return build_item_cases(split)
    return build_user_cases(split)


def model_dims(config, train_set):
    if config.variant == "item":
        return ModelDims(train_set.num_users, config.hidden_units, train_set.K, "item",
                         (len(train_set.genre_names),))
    sizes = () if config.variant == "plain" else (
        train_set.occupation.shape[1], train_set.age.shape[1], train_set.gender.shape[1])
    return ModelDims(train_set.num_items, config.hidden_units, train_set.K,
                     config.model_variant, sizes)


def evaluate_split(params, labels, config, split, cases):
    """Expected-rating predictions for every test triple of ``split``."""
    train_set, test = split.train, split.test
    if config.variant == "item":
        owners, queries = test.items, test.users
        owner_seen = np.bincount(train_set.items, minlength=train_set.num_items) > 0
        query_seen = np.bincount(train_set.users, minlength=train_set.num_users) > 0
    else:
        owners, queries = test.users, test.items
        owner_seen = np.bincount(train_set.users, minlength=train_set.num_users) > 0
        query_seen = np.bincount(train_set.items, minlength=train_set.num_items) > 0
    by_owner = {c.owner: c for c in cases}
    dist, cold = predict_many(params, labels, by_owner, owners, queries)
    expected = dist @ np.arange(1, params.K + 1)
    both_unseen = ~owner_seen[owners] & ~query_seen[queries]
    if both_unseen.any():
        expected[both_unseen] = float(np.mean(train_set.ratings))
    return expected, int(cold.sum() - both_unseen.sum()), int(both_unseen.sum())


def run_fold(split, config, seed=None, on_epoch=None):
    seed = config.seed if seed is None else seed
    cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
    start = time.perf_counter()
    cases = cases_for(cfg, split)
    dims = model_dims(cfg, split.train)
    params, labels, records = train(cases, cfg, dims, on_epoch=on_epoch)
    expected, n_cold, n_global = evaluate_split(params, labels, cfg, split, cases)
    truth = split.test.ratings
    err = expected - truth
    result = FoldResult(split.fold_index, mae(expected, truth), rmse(expected, truth), truth.size,
                        seed, n_cold, n_global, float(np.abs(err).sum()), float((err ** 2).sum()),
                        time.perf_counter() - start)
    return result, (params, labels, records)


def run_cv(folds, config, dataset_id="custom", on_fold=None):
    """Train and evaluate one model per fold; aggregates are unweighted fold means."""
    start = time.perf_counter()
    report = EvalReport(method_name(config), dataset_id, config.to_dict(), config.seed)
    for split in folds:
        try:
            result, _ = run_fold(split, config, fold_seed(config.seed, split.fold_index))
        except NumericalError as err:
            raise NumericalError(f"fold {split.fold_index}: {err}") from err
        log.info("%s fold %d: MAE %.4f RMSE %.4f", report.method, result.fold_index, result.mae, result.rmse)
        report.folds.append(result)
        if on_fold is not None:
            on_fold(result)
    report.wall_time = time.perf_counter() - start
    return report


def baseline_item_mean(split):
    """Predict each item's mean training rating, falling back to the global mean."""
    train_set, test = split.train, split.test
    global_mean = float(np.mean(train_set.ratings))
    sums = np.bincount(train_set.items, weights=train_set.ratings, minlength=train_set.num_items)
    counts = np.bincount(train_set.items, minlength=train_set.num_items)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    pred = means[test.items]
    err = pred - test.ratings
    return FoldResult(split.fold_index, mae(pred, test.ratings), rmse(pred, test.ratings),
                      test.ratings.size, 0, 0, int((counts[test.items] == 0).sum()),
                      float(np.abs(err).sum()), float((err ** 2).sum()))


def baseline_report(folds, dataset_id="custom"):
    report = EvalReport("Item mean", dataset_id, {}, 0)
    report.folds = [baseline_item_mean(s) for s in folds]
    return report
