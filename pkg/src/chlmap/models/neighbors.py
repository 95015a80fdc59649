import numpy as np

from ..errors import DomainError
from .base import Regressor


class KNeighborsRegressor(Regressor):
    """Inverse-distance weighted k-nearest-neighbour regression.

    Distances are Euclidean. A query that coincides with one or more training
    points returns the plain mean of those points' targets. Ties at the k-th
    distance keep the lower training row index.
    """

    _state_attrs = ("X_", "y_", "n_features_in_")

    def __init__(self, n_neighbors=5, chunk_size=256):
        self.n_neighbors = n_neighbors
        self.chunk_size = chunk_size

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        if self.n_neighbors < 1 or self.n_neighbors > X.shape[0]:
            raise DomainError(f"n_neighbors={self.n_neighbors} invalid for {X.shape[0]} training rows")
        self.X_ = X.copy()
        self.y_ = y.copy()
        return self

    def kneighbors(self, X):
        """(distances, indices) of the k nearest training rows for each query."""
        X = self._validate_predict(X)
        k = self.n_neighbors
        dist = np.empty((X.shape[0], k))
        idx = np.empty((X.shape[0], k), dtype=np.int64)
        for s in range(0, X.shape[0], self.chunk_size):
            d = self._distances(X[s:s + self.chunk_size])
            order = np.argsort(d, axis=1, kind="stable")[:, :k]
            idx[s:s + len(d)] = order
            dist[s:s + len(d)] = np.take_along_axis(d, order, axis=1)
        return dist, idx

    def _distances(self, Q):
        diff = Q[:, None, :] - self.X_[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))

    def predict(self, X):
        X = self._validate_predict(X)
        k = self.n_neighbors
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], self.chunk_size):
            d = self._distances(X[s:s + self.chunk_size])
            order = np.argsort(d, axis=1, kind="stable")[:, :k]
            dk = np.take_along_axis(d, order, axis=1)
            yk = self.y_[order]
            for i in range(len(d)):
                zero = d[i] == 0.0
                if zero.any():
                    out[s + i] = self.y_[zero].mean()
                else:
                    w = 1.0 / dk[i]
                    out[s + i] = (w * yk[i]).sum() / w.sum()
        return out
