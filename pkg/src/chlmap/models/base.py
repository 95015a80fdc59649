"""Shared plumbing for the regressors: specs, scaling, persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..errors import ContractError, FormatError

MODEL_FORMAT_VERSION = 1


class StateMixin:
    """JSON-able fitted state for estimators.

    Subclasses list their learned attributes in ``_state_attrs``.
    """

    _state_attrs: tuple = ()

    def get_state(self) -> dict:
        check_is_fitted(self)
        return {a: _encode(getattr(self, a)) for a in self._state_attrs}

    def set_state(self, state: dict):
        for a in self._state_attrs:
            setattr(self, a, _decode(state[a]))
        return self


def _encode(v):
    if isinstance(v, np.ndarray):
        return {"__ndarray__": v.ravel().tolist(), "dtype": str(v.dtype), "shape": list(v.shape)}
    if isinstance(v, (list, tuple)):
        return [_encode(x) for x in v]
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


def _decode(v):
    if isinstance(v, dict) and "__ndarray__" in v:
        return np.array(v["__ndarray__"], dtype=v["dtype"]).reshape(v["shape"])
    if isinstance(v, list):
        return [_decode(x) for x in v]
    if isinstance(v, dict):
        return {k: _decode(x) for k, x in v.items()}
    return v


class Standardizer(StateMixin, TransformerMixin, BaseEstimator):
    """Per-feature z-scoring; zero-variance features keep a unit scale."""

    _state_attrs = ("mean_", "scale_")

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64, ensure_all_finite=False)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_


def row_dot(X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Row-wise dot product whose result for a row never depends on batch size."""
    return (np.ascontiguousarray(X) * coef).sum(axis=1)


@dataclass
class ModelSpec:
    """What to fit: estimator kind, hyperparameters and scaling policy.

    ``label`` is the column name used in reports (e.g. XGB realised as GBT).
    """

    kind: str
    params: dict = field(default_factory=dict)
    needs_scaling: bool = False
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        if self.label is None:
            self.label = self.kind

    def to_dict(self):
        return {"kind": self.kind, "params": _encode(self.params),
                "needs_scaling": self.needs_scaling, "seed": self.seed, "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], _decode(d.get("params", {})), bool(d.get("needs_scaling", False)),
                   int(d.get("seed", 0)), d.get("label"))

    def with_params(self, **params):
        return ModelSpec(self.kind, {**self.params, **params}, self.needs_scaling, self.seed, self.label)


class TrainedModel:
    """A fitted estimator bound to its feature names and optional scaler.

    ``predict`` aligns input columns by name, so callers can pass a
    DataFrame or FeatureTable whose columns are in any order.
    """

    def __init__(self, spec: ModelSpec, estimator, feature_names, standardizer=None, metadata=None):
        self.spec = spec
        self.estimator = estimator
        self.feature_names = list(feature_names)
        self.standardizer = standardizer
        self.metadata = dict(metadata or {})

    def _align(self, X, feature_names=None) -> np.ndarray:
        if isinstance(X, pd.DataFrame):
            names = list(X.columns)
            mat = X
        elif hasattr(X, "feature_names") and hasattr(X, "X"):
            names = list(X.feature_names)
            mat = X.X
        else:
            if feature_names is None:
                raise ContractError("plain arrays need explicit feature_names")
            names = list(feature_names)
            mat = X
        pos = {n: i for i, n in enumerate(names)}
        missing = [f for f in self.feature_names if f not in pos]
        if missing:
            raise ContractError(f"missing features: {missing[:5]}")
        mat = np.asarray(mat, dtype=np.float64)
        if names == self.feature_names:
            return mat
        return mat[:, [pos[f] for f in self.feature_names]]

    def predict(self, X, feature_names=None) -> np.ndarray:
        A = self._align(X, feature_names)
        if self.standardizer is not None:
            A = self.standardizer.transform(A)
        return self.estimator.predict(A)

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "feature_names": self.feature_names,
            "standardizer": None if self.standardizer is None else self.standardizer.get_state(),
            # n_jobs only affects speed, never results, so it stays out of the hash
            "estimator_params": _encode({k: v for k, v in self.estimator.get_params().items()
                                         if k != "n_jobs"}),
            "state": self.estimator.get_state(),
            "metadata": _encode(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d) -> "TrainedModel":
        from . import ESTIMATORS

        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise FormatError(f"unsupported model format {d.get('format_version')!r}")
        spec = ModelSpec.from_dict(d["spec"])
        est = ESTIMATORS[spec.kind](**_decode(d["estimator_params"]))
        est.set_state(d["state"])
        std = None
        if d.get("standardizer") is not None:
            std = Standardizer().set_state(d["standardizer"])
        return cls(spec, est, d["feature_names"], std, _decode(d.get("metadata", {})))


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_text(model.to_json())


def load_model(path) -> TrainedModel:
    try:
        d = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: not a model file ({exc})") from exc
    return TrainedModel.from_dict(d)


class Regressor(StateMixin, RegressorMixin, BaseEstimator):
    """Common validation for the in-repo regressors."""

    def _validate_fit(self, X, y):
        from sklearn.utils.validation import check_X_y

        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        return X, y.astype(np.float64)

    def _validate_predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X
