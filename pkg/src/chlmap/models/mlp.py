"""Fully connected feed-forward regressor trained by mini-batch gradient descent."""

from __future__ import annotations

import numpy as np

from ..errors import TrainingDivergedError
from .base import Regressor

DIVERGENCE_FACTOR = 1e6


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _affine(A, W, b):
    # einsum keeps each output row independent of how many rows are batched
    return np.einsum("ij,jk->ik", A, W, optimize=False) + b


def forward(params, X, activation):
    """Returns (output, pre-activations, activations) for ``params = [W1, b1, ...]``."""
    A = X
    zs, acts = [], [X]
    n_layers = len(params) // 2
    for layer in range(n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        Z = _affine(A, W, b)
        if layer < n_layers - 1:
            A = _act(activation, Z)
        else:
            A = Z
        zs.append(Z)
        acts.append(A)
    return A[:, 0], zs, acts


def loss_and_grads(params, X, y, activation, alpha):
    """Loss ``0.5 * mean((f(X) - y)^2) + alpha/(2n) * sum(W^2)`` and its gradients."""
    n = X.shape[0]
    out, zs, acts = forward(params, X, activation)
    err = out - y
    loss = 0.5 * float(err @ err) / n
    n_layers = len(params) // 2
    loss += 0.5 * alpha / n * sum(float((params[2 * i] ** 2).sum()) for i in range(n_layers))
    grads = [None] * len(params)
    delta = (err / n)[:, None]
    for layer in range(n_layers - 1, -1, -1):
        W = params[2 * layer]
        grads[2 * layer] = acts[layer].T @ delta + alpha / n * W
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ W.T) * _act_grad(activation, zs[layer - 1], acts[layer])
    return loss, grads


class MLPRegressor(Regressor):
    """Squared-error MLP with Glorot-uniform initialisation.

    ``hidden_layer_sizes=()`` gives a plain linear model trained by the same
    optimiser. Training aborts with :class:`TrainingDivergedError` when the
    full-batch loss exceeds a million times its initial value.
    """

    _state_attrs = ("coefs_", "n_features_in_")

    def __init__(self, hidden_layer_sizes=(100,), activation="relu", solver="adam",
                 learning_rate_init=1e-3, max_iter=200, batch_size=200, alpha=1e-4,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.solver = solver
        self.learning_rate_init = learning_rate_init
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.alpha = alpha
        self.random_state = random_state

    def init_params(self, n_features, rng):
        sizes = [n_features, *[int(s) for s in self.hidden_layer_sizes], 1]
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(rng.uniform(-bound, bound, size=fan_out))
        return params

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        _act(self.activation, np.zeros(1))
        if self.solver not in ("adam", "sgd"):
            raise ValueError(f"unknown solver {self.solver!r}")
        rng = np.random.default_rng(self.random_state)
        params = self.init_params(X.shape[1], rng)
        n = X.shape[0]
        bs = max(1, min(int(self.batch_size), n))
        lr = self.learning_rate_init
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = 0
        initial, _ = loss_and_grads(params, X, y, self.activation, self.alpha)
        limit = DIVERGENCE_FACTOR * max(initial, 1e-12)
        self.loss_curve_ = [initial]
        for epoch in range(self.max_iter):
            order = rng.permutation(n)
            for s in range(0, n, bs):
                idx = order[s:s + bs]
                _, grads = loss_and_grads(params, X[idx], y[idx], self.activation, self.alpha)
                t += 1
                for i, g in enumerate(grads):
                    if self.solver == "adam":
                        m[i] = b1 * m[i] + (1 - b1) * g
                        v[i] = b2 * v[i] + (1 - b2) * g * g
                        mh = m[i] / (1 - b1 ** t)
                        vh = v[i] / (1 - b2 ** t)
                        params[i] = params[i] - lr * mh / (np.sqrt(vh) + eps)
                    else:
                        params[i] = params[i] - lr * g
            loss, _ = loss_and_grads(params, X, y, self.activation, self.alpha)
            self.loss_curve_.append(loss)
            if not np.isfinite(loss) or loss > limit:
                raise TrainingDivergedError(
                    f"MLP loss {loss:.3g} at epoch {epoch + 1} exceeds {DIVERGENCE_FACTOR:g}x "
                    f"the initial loss {initial:.3g}; lower learning_rate_init")
        self.coefs_ = params
        return self

    def predict(self, X):
        X = self._validate_predict(X)
        out, _, _ = forward(self.coefs_, X, self.activation)
        return out
