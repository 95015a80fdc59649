import math

import numpy as np
import pandas as pd
import pytest

from chlmap.errors import DomainError, UndefinedMetricError
from chlmap.evaluation import (EvalReport, cross_validate, evaluate_ensemble, make_split_plan,
                               processor_of, r2, rank_datasets, random_search, reports_from_json,
                               reports_to_json, rmse, sample_params, stratified_kfold,
                               stratified_split)
from chlmap.features import FeatureTable
from chlmap.models import default_spec


def test_metric_examples():
    assert rmse([0, 0], [3, 4]) == math.sqrt(12.5)
    assert r2([1, 2, 3], [1, 2, 3]) == 1.0
    assert r2([1, 2, 3], [2, 2, 2]) == 0.0
    with pytest.raises(UndefinedMetricError):
        r2([2, 2, 2], [1, 2, 3])
    with pytest.raises(UndefinedMetricError):
        r2([1.0], [1.0])
    with pytest.raises(ValueError):
        rmse([1, 2], [1])


def test_split_example_forty_rows():
    labels = np.zeros(40, dtype=bool)
    labels[:10] = True
    test = stratified_split(labels, 0.25, seed=3)
    assert test.size == 10 and labels[test].sum() in (2, 3)
    assert np.array_equal(test, stratified_split(labels, 0.25, seed=3))


def test_kfold_example_four_high():
    labels = np.zeros(30, dtype=bool)
    labels[:4] = True
    fold = stratified_kfold(labels, 5, seed=0)
    per = sorted(int(labels[fold == f].sum()) for f in range(5))
    assert per == [0, 1, 1, 1, 1]
    with pytest.raises(DomainError):
        stratified_kfold(labels[:3], 5)


def test_single_member_class_falls_back():
    labels = np.zeros(12, dtype=bool)
    labels[0] = True
    assert stratified_split(labels, 0.25, seed=1).size == 3


def test_split_plan_covers_rows(rng):
    y = rng.uniform(0, 10, size=57)
    plan = make_split_plan(y, seed=2)
    assert plan.test_rows.size == math.ceil(0.25 * 57)
    assert np.all(plan.fold[plan.test_rows] == -1)
    assert set(np.unique(plan.fold[plan.train_rows])) == set(range(5))
    tr, va = plan.fold_rows(0)
    assert not set(tr) & set(va) and not set(va) & set(plan.test_rows)


def _linear_table(rng, n=80, p=3, noise=0.0):
    X = rng.uniform(0, 1, size=(n, p))
    y = X @ np.arange(1.0, p + 1) * 4 + 1 + rng.normal(scale=noise, size=n) if noise else \
        X @ np.arange(1.0, p + 1) * 4 + 1
    keys = pd.DataFrame({"Date": range(n), "Buoy": ["CTD-1"] * n})
    names = [f"rhow_B{i}" for i in range(p)]
    return FeatureTable("C2X_rhow_1x1_depth_in_0_1", keys, names, X, y, 0, tuple(names))


def test_cross_validate_linear(rng):
    t = _linear_table(rng)
    plan = make_split_plan(t.y, seed=0)
    res = cross_validate(default_spec("LR"), t, plan)
    assert res.report.ok and res.report.val_r2 > 0.999999 and res.report.test_r2 > 0.999999
    assert np.isnan(res.oof[plan.test_rows]).all()
    assert np.isfinite(res.oof[plan.train_rows]).all()
    assert len(res.report.meta["model_hashes"]) == 5
    par = cross_validate(default_spec("LR"), t, plan, n_jobs=3)
    assert par.report.to_dict() == res.report.to_dict()


def test_cross_validate_failure_is_reported(rng):
    t = _linear_table(rng, n=12)
    plan = make_split_plan(t.y, seed=0)
    res = cross_validate(default_spec("KNN").with_params(n_neighbors=50), t, plan)
    assert res.report.status == "failed" and "DomainError" in res.report.error


def test_report_json_roundtrip(rng):
    t = _linear_table(rng)
    rep = cross_validate(default_spec("LR"), t, make_split_plan(t.y)).report
    back = reports_from_json(reports_to_json([rep]))[0]
    assert back.to_dict() == rep.to_dict()
    assert isinstance(back, EvalReport)


def test_ensemble_single_model_pass_through(rng):
    n = 60
    y = rng.uniform(0, 10, size=n)
    folds = np.arange(n) % 5
    test = rng.uniform(0, 10, size=15)
    res = evaluate_ensemble(y, y, folds, test, lambda_l2=1e-9)
    assert np.abs(res.oof - y).max() < 1e-6
    assert np.abs(res.test_pred - test).max() < 1e-6


def test_ranking_per_processor():
    def rep(ds, v):
        return EvalReport(ds, "LR", "LR", val_r2=v, val_rmse=1.0 - v)
    reps = [rep("C2X_rhow_1x1_depth_in_0_1", 0.5), rep("C2X_rhown_1x1_depth_in_0_1", 0.9),
            rep("TOA_3x3_depth_in_0_1", 0.7), rep("C2X_rhow_3x3_depth_in_0_1", 0.6),
            rep("C2X_rhow_3x3_depth_in_0_1", 0.65)]
    assert rank_datasets(reps, None) == ["C2X_rhown_1x1_depth_in_0_1", "TOA_3x3_depth_in_0_1",
                                         "C2X_rhow_3x3_depth_in_0_1", "C2X_rhow_1x1_depth_in_0_1"]
    assert rank_datasets(reps, 1) == ["C2X_rhown_1x1_depth_in_0_1", "TOA_3x3_depth_in_0_1"]
    assert processor_of("C2X-Complex_rhow_9x9_depth_in_0_1") == "C2X-Complex"


def test_search(rng):
    space = {"n_neighbors": {"type": "int", "low": 1, "high": 4},
             "w": {"type": "layers", "min_layers": 1, "max_layers": 2, "low": 8, "high": 9},
             "a": {"type": "log", "low": 1e-3, "high": 1.0}, "c": {"type": "choice", "values": ["x"]}}
    p = sample_params(space, np.random.default_rng(0))
    assert 1 <= p["n_neighbors"] <= 4 and 1e-3 <= p["a"] <= 1 and p["c"] == "x"
    assert p == sample_params(space, np.random.default_rng(0))
    t = _linear_table(rng)
    plan = make_split_plan(t.y)
    res = random_search(default_spec("KNN"), {"n_neighbors": space["n_neighbors"]}, 3, t, plan, seed=1)
    assert len(res.trials) == 3 and res.best_score == max(tr["score"] for tr in res.trials)
    with pytest.raises(DomainError):
        random_search(default_spec("KNN"), {}, 0, t, plan)
