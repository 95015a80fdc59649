"""Regression model suite with a uniform fit/predict/serialize contract."""

from __future__ import annotations

import numpy as np

from .base import (ModelSpec, Standardizer, TrainedModel, load_model, row_dot,
                   save_model)
from .linear import ElasticNet, LinearRegression, MeanRegressor, Ridge
from .mlp import MLPRegressor
from .neighbors import KNeighborsRegressor
from .trees import GradientBoostingRegressor, RandomForestRegressor

ESTIMATORS = {
    "LR": LinearRegression,
    "Ridge": Ridge,
    "ELN": ElasticNet,
    "KNN": KNeighborsRegressor,
    "RF": RandomForestRegressor,
    "GBT": GradientBoostingRegressor,
    "MLP": MLPRegressor,
    "Mean": MeanRegressor,
}

SCALED_KINDS = {"KNN", "MLP", "ELN", "Ridge"}

# report column -> estimator realising it
MODEL_COLUMNS = ("CAT", "ELN", "ENS", "KNN", "LBM", "LR", "MLP", "RF", "SVR", "XGB")
UNSUPPORTED_COLUMNS = {"SVR": "out of scope"}
SUBSTITUTIONS = {"CAT": "gbt-as-cat", "LBM": "gbt-as-lbm", "XGB": "gbt-as-xgb"}

_GBT_FLAVOURS = {
    "XGB": dict(n_estimators=100, learning_rate=0.3, max_depth=6, reg_lambda=1.0,
                min_child_weight=1.0),
    "LBM": dict(n_estimators=100, learning_rate=0.1, max_depth=5, reg_lambda=0.0,
                min_child_weight=1e-3),
    "CAT": dict(n_estimators=500, learning_rate=0.05, max_depth=6, reg_lambda=3.0,
                min_child_weight=1.0),
}


def default_spec(label: str, seed: int = 0) -> ModelSpec:
    """Default-hyperparameter spec for a report column or estimator kind."""
    if label in _GBT_FLAVOURS:
        return ModelSpec("GBT", dict(_GBT_FLAVOURS[label]), False, seed, label)
    defaults = {
        "LR": {},
        "Ridge": {"alpha": 1.0},
        "ELN": {"alpha": 1.0, "l1_ratio": 0.5},
        "KNN": {"n_neighbors": 5},
        "RF": {"n_estimators": 100},
        "GBT": dict(_GBT_FLAVOURS["XGB"]),
        "MLP": {"hidden_layer_sizes": [100], "max_iter": 200},
        "Mean": {},
    }
    if label not in defaults:
        raise KeyError(f"no estimator for model {label!r}")
    return ModelSpec(label, defaults[label], label in SCALED_KINDS, seed, label)


def make_estimator(spec: ModelSpec, n_jobs: int = 1):
    cls = ESTIMATORS[spec.kind]
    params = dict(spec.params)
    names = cls().get_params()
    if "random_state" in names:
        params.setdefault("random_state", spec.seed)
    if "n_jobs" in names:
        params["n_jobs"] = n_jobs
    if "hidden_layer_sizes" in params:
        params["hidden_layer_sizes"] = tuple(int(v) for v in params["hidden_layer_sizes"])
    unknown = set(params) - set(names)
    if unknown:
        raise ValueError(f"{spec.kind}: unknown hyperparameters {sorted(unknown)}")
    return cls(**params)


def fit_model(spec: ModelSpec, X, y=None, feature_names=None, n_jobs: int = 1,
              metadata=None) -> TrainedModel:
    """Fit ``spec`` on a FeatureTable or on a matrix plus ``feature_names``."""
    if hasattr(X, "feature_names") and hasattr(X, "X"):
        names = list(X.feature_names) if feature_names is None else list(feature_names)
        mat = X.columns(names)
        y = X.y if y is None else y
    else:
        mat = np.asarray(X, dtype=np.float64)
        names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(mat.shape[1])]
    std = None
    if spec.needs_scaling:
        std = Standardizer().fit(mat)
        mat = std.transform(mat)
    est = make_estimator(spec, n_jobs).fit(mat, np.asarray(y, dtype=np.float64))
    meta = dict(metadata or {})
    if getattr(est, "rank_deficient_", False):
        meta["rank_deficient"] = True
    if getattr(est, "converged_", True) is False:
        meta["converged"] = False
    if spec.label in SUBSTITUTIONS:
        meta["substitution"] = SUBSTITUTIONS[spec.label]
    return TrainedModel(spec, est, names, std, meta)


def _fit(kind, X, y, scale, seed=0, feature_names=None, **params):
    return fit_model(ModelSpec(kind, params, scale, seed), X, y, feature_names)


def fit_linear(X, y, feature_names=None, scale=False):
    return _fit("LR", X, y, scale, feature_names=feature_names)


def fit_ridge(X, y, lambda_l2=1.0, feature_names=None, scale=False):
    return _fit("Ridge", X, y, scale, feature_names=feature_names, alpha=lambda_l2)


def fit_elastic_net(X, y, alpha=1.0, l1_ratio=0.5, max_iter=1000, tol=1e-4,
                    feature_names=None, scale=False):
    return _fit("ELN", X, y, scale, feature_names=feature_names, alpha=alpha,
                l1_ratio=l1_ratio, max_iter=max_iter, tol=tol)


def fit_knn(X, y, k=5, feature_names=None, scale=False):
    return _fit("KNN", X, y, scale, feature_names=feature_names, n_neighbors=k)


def fit_random_forest(X, y, n_trees=100, max_depth=None, min_samples_leaf=1,
                      max_features=1.0, seed=0, feature_names=None):
    return _fit("RF", X, y, False, seed, feature_names, n_estimators=n_trees,
                max_depth=max_depth, min_samples_leaf=min_samples_leaf,
                max_features=max_features)


def fit_gbt(X, y, n_rounds=100, learning_rate=0.3, max_depth=6, lambda_l2=1.0,
            gamma_min_gain=0.0, min_child_weight=1.0, seed=0, feature_names=None):
    return _fit("GBT", X, y, False, seed, feature_names, n_estimators=n_rounds,
                learning_rate=learning_rate, max_depth=max_depth, reg_lambda=lambda_l2,
                gamma=gamma_min_gain, min_child_weight=min_child_weight)


def fit_mlp(X, y, hidden_layers=(100,), activation="relu", lr=1e-3, epochs=200,
            batch_size=200, seed=0, feature_names=None, scale=False, solver="adam", alpha=1e-4):
    return _fit("MLP", X, y, scale, seed, feature_names, hidden_layer_sizes=tuple(hidden_layers),
                activation=activation, learning_rate_init=lr, max_iter=epochs,
                batch_size=batch_size, solver=solver, alpha=alpha)


__all__ = [
    "ESTIMATORS", "MODEL_COLUMNS", "SUBSTITUTIONS", "UNSUPPORTED_COLUMNS", "ModelSpec",
    "Standardizer", "TrainedModel", "default_spec", "make_estimator", "fit_model",
    "fit_linear", "fit_ridge", "fit_elastic_net", "fit_knn", "fit_random_forest", "fit_gbt",
    "fit_mlp", "save_model", "load_model", "row_dot", "ElasticNet", "LinearRegression",
    "MeanRegressor", "Ridge", "MLPRegressor", "KNeighborsRegressor",
    "GradientBoostingRegressor", "RandomForestRegressor",
]
