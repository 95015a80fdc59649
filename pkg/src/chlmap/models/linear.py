"""Linear models: OLS, ridge, elastic net and a mean baseline."""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.exceptions import ConvergenceWarning

from .base import Regressor, row_dot


def _center(X, y, fit_intercept):
    if fit_intercept:
        x_mean = X.mean(axis=0)
        y_mean = float(y.mean())
    else:
        x_mean = np.zeros(X.shape[1])
        y_mean = 0.0
    return X - x_mean, y - y_mean, x_mean, y_mean


class _LinearPredictMixin:
    def predict(self, X):
        X = self._validate_predict(X)
        return row_dot(X, self.coef_) + self.intercept_


class MeanRegressor(_LinearPredictMixin, Regressor):
    """Predicts the training mean; a reference point for R2."""

    _state_attrs = ("coef_", "intercept_", "n_features_in_")

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        self.coef_ = np.zeros(X.shape[1])
        self.intercept_ = float(y.mean())
        return self


class LinearRegression(_LinearPredictMixin, Regressor):
    """Ordinary least squares through an SVD-based least-squares solve.

    Rank-deficient designs get the minimum-norm solution and set
    ``rank_deficient_``.
    """

    _state_attrs = ("coef_", "intercept_", "rank_", "rank_deficient_", "n_features_in_")

    def __init__(self, fit_intercept=True):
        self.fit_intercept = fit_intercept

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        Xc, yc, x_mean, y_mean = _center(X, y, self.fit_intercept)
        coef, _, rank, _ = np.linalg.lstsq(Xc, yc, rcond=None)
        self.coef_ = coef
        self.rank_ = int(rank)
        self.rank_deficient_ = bool(rank < X.shape[1])
        self.intercept_ = float(y_mean - x_mean @ coef)
        return self


class Ridge(_LinearPredictMixin, Regressor):
    """L2-penalised least squares with an unpenalised intercept.

    Solves (Xc'Xc + alpha I) b = Xc'yc via the SVD of the centered design,
    which stays well defined at alpha = 0 for rank-deficient inputs.
    """

    _state_attrs = ("coef_", "intercept_", "n_features_in_")

    def __init__(self, alpha=1.0, fit_intercept=True):
        self.alpha = alpha
        self.fit_intercept = fit_intercept

    def fit(self, X, y):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        X, y = self._validate_fit(X, y)
        Xc, yc, x_mean, y_mean = _center(X, y, self.fit_intercept)
        U, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        cutoff = np.finfo(float).eps * max(Xc.shape) * (s[0] if s.size else 0.0)
        keep = s > cutoff
        d = np.zeros_like(s)
        d[keep] = s[keep] / (s[keep] ** 2 + self.alpha)
        self.coef_ = Vt.T @ (d * (U.T @ yc))
        self.intercept_ = float(y_mean - x_mean @ self.coef_)
        return self


def soft_threshold(z, t):
    return np.sign(z) * max(abs(z) - t, 0.0)


class ElasticNet(_LinearPredictMixin, Regressor):
    """Cyclic coordinate descent on the elastic-net objective.

    Minimises ``1/(2n) ||y - Xb||^2 + alpha * (l1_ratio ||b||_1 +
    (1 - l1_ratio)/2 ||b||^2)`` with an unpenalised intercept. Iteration
    stops once the largest coefficient change in a sweep is below ``tol``.
    The objective after every sweep is kept in ``objective_path_``.
    """

    _state_attrs = ("coef_", "intercept_", "n_iter_", "converged_", "n_features_in_")

    def __init__(self, alpha=1.0, l1_ratio=0.5, max_iter=1000, tol=1e-4, fit_intercept=True):
        self.alpha = alpha
        self.l1_ratio = l1_ratio
        self.max_iter = max_iter
        self.tol = tol
        self.fit_intercept = fit_intercept

    def objective(self, X, y, coef, intercept):
        r = y - X @ coef - intercept
        return (r @ r) / (2 * len(y)) + self.alpha * (
            self.l1_ratio * np.abs(coef).sum() + 0.5 * (1 - self.l1_ratio) * coef @ coef)

    def fit(self, X, y):
        if self.alpha < 0 or not 0 <= self.l1_ratio <= 1:
            raise ValueError("need alpha >= 0 and l1_ratio in [0, 1]")
        X, y = self._validate_fit(X, y)
        n, p = X.shape
        Xc, yc, x_mean, y_mean = _center(X, y, self.fit_intercept)
        col_sq = (Xc * Xc).sum(axis=0) / n
        l1 = self.alpha * self.l1_ratio
        l2 = self.alpha * (1 - self.l1_ratio)
        coef = np.zeros(p)
        resid = yc.copy()
        self.objective_path_ = []
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            max_delta = 0.0
            for j in range(p):
                if col_sq[j] == 0.0:
                    continue
                old = coef[j]
                xj = Xc[:, j]
                z = xj @ resid / n + col_sq[j] * old
                new = soft_threshold(z, l1) / (col_sq[j] + l2)
                if new != old:
                    resid -= xj * (new - old)
                    coef[j] = new
                    max_delta = max(max_delta, abs(new - old))
            self.objective_path_.append(self.objective(Xc, yc, coef, 0.0))
            if max_delta < self.tol:
                self.converged_ = True
                break
        self.n_iter_ = it if self.max_iter > 0 else 0
        if not self.converged_:
            warnings.warn(f"elastic net did not converge in {self.max_iter} sweeps",
                          ConvergenceWarning, stacklevel=2)
        self.coef_ = coef
        self.intercept_ = float(y_mean - x_mean @ coef)
        return self
