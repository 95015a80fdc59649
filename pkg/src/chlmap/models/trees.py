"""Exact-greedy regression trees, random forests and second-order boosting.

Both ensembles share one tree grower driven by per-sample gradients ``g``
and hessians ``h``. For a node with sums G, H the leaf weight is
``-G / (H + lambda)`` and a split into L/R scores

    gain = 0.5 * (GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)) - gamma

With g = -y, h = 1 and lambda = gamma = 0 this is half the reduction in
squared error and the leaf weight is the node mean, which is what the random
forest uses.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .base import Regressor


class Tree:
    """Flat array representation; ``feature == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def node_count(self):
        return self.feature.size

    def depth(self):
        depth = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if depth.size else 0

    def apply(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            a_rows = rows[active]
            a_node = node[active]
            go_left = X[a_rows, f[active]] <= self.threshold[a_node]
            node[active] = np.where(go_left, self.left[a_node], self.right[a_node])

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_state(self):
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "value": self.value}

    @classmethod
    def from_state(cls, s):
        return cls(s["feature"], s["threshold"], s["left"], s["right"], s["value"])


def _best_split(Xn, g, h, G, H, reg_lambda, gamma, min_samples_leaf, min_child_weight):
    """Best (gain, position, column) over all columns of ``Xn`` or None."""
    m = Xn.shape[0]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    GL = np.cumsum(g[order], axis=0)[:-1]
    HL = np.cumsum(h[order], axis=0)[:-1]
    GR = G - GL
    HR = H - HL
    n_left = np.arange(1, m)[:, None]
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_samples_leaf) & (m - n_left >= min_samples_leaf)
    valid &= (HL >= min_child_weight) & (HR >= min_child_weight)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda)
                      - G * G / (H + reg_lambda)) - gamma
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    pos, col = divmod(flat, gain.shape[1])
    lo, hi = xs[pos, col], xs[pos + 1, col]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(gain[pos, col]), thr, col


def grow_tree(X, g, h, *, max_depth=None, min_samples_leaf=1, min_child_weight=0.0,
              reg_lambda=0.0, gamma=0.0, max_features=None, rng=None,
              rows=None) -> Tree:
    """Depth-first exact greedy growth; splits need strictly positive gain."""
    n, p = X.shape
    rows = np.arange(n) if rows is None else np.asarray(rows)
    max_depth = np.inf if max_depth is None or max_depth < 0 else max_depth
    k = p if max_features is None else max(1, min(p, int(max_features)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        G = g[idx].sum()
        H = h[idx].sum()
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-G / (H + reg_lambda) if H + reg_lambda > 0 else 0.0)
        return len(feature) - 1, G, H

    root, G0, H0 = new_node(rows)
    stack = [(root, rows, 0, G0, H0)]
    while stack:
        node, idx, depth, G, H = stack.pop()
        if depth >= max_depth or idx.size < 2 * min_samples_leaf:
            continue
        cols = np.arange(p) if k == p else np.sort(rng.choice(p, size=k, replace=False))
        found = _best_split(X[np.ix_(idx, cols)], g[idx], h[idx], G, H, reg_lambda, gamma,
                            min_samples_leaf, min_child_weight)
        if found is None or not found[0] > 0:
            continue
        _, thr, c = found
        f = int(cols[c])
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        lnode, GL, HL = new_node(li)
        rnode, GR, HR = new_node(ri)
        feature[node], threshold[node] = f, thr
        left[node], right[node] = lnode, rnode
        # right pushed first so the left subtree is expanded first
        stack.append((rnode, ri, depth + 1, GR, HR))
        stack.append((lnode, li, depth + 1, GL, HL))
    return Tree(feature, threshold, left, right, value)


def _resolve_max_features(max_features, p):
    if max_features is None:
        return p
    if max_features == "sqrt":
        return max(1, int(np.sqrt(p)))
    if max_features == "log2":
        return max(1, int(np.log2(p)))
    if isinstance(max_features, float):
        return max(1, int(round(max_features * p)))
    return int(max_features)


class RandomForestRegressor(Regressor):
    """Bagged variance-reduction trees averaged at prediction time.

    Every tree draws its own generator from ``SeedSequence(random_state)``,
    so results do not depend on ``n_jobs``.
    """

    _state_attrs = ("trees_", "n_features_in_")

    def __init__(self, n_estimators=100, max_depth=None, min_samples_leaf=1,
                 max_features=1.0, bootstrap=True, random_state=0, n_jobs=1):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        n, p = X.shape
        k = _resolve_max_features(self.max_features, p)
        g = -y
        h = np.ones(n)
        seqs = np.random.SeedSequence(self.random_state).spawn(self.n_estimators)

        def one(seq):
            rng = np.random.default_rng(seq)
            rows = rng.integers(0, n, size=n) if self.bootstrap else np.arange(n)
            return grow_tree(X, g, h, max_depth=self.max_depth,
                             min_samples_leaf=self.min_samples_leaf,
                             max_features=k, rng=rng, rows=rows)

        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as ex:
                trees = list(ex.map(one, seqs))
        else:
            trees = [one(s) for s in seqs]
        self.trees_ = [t.to_state() for t in trees]
        self._trees = trees
        return self

    def set_state(self, state):
        super().set_state(state)
        self._trees = [Tree.from_state(s) for s in self.trees_]
        return self

    def predict(self, X):
        X = self._validate_predict(X)
        total = np.zeros(X.shape[0])
        for t in self._trees:
            total += t.predict(X)
        return total / len(self._trees)


class GradientBoostingRegressor(Regressor):
    """Second-order gradient boosting with L2-regularised leaves.

    Squared-error loss, so gradients are ``pred - y`` and hessians are 1.
    The model starts from ``base_score_ = mean(y)``; each round adds
    ``learning_rate`` times a tree fitted to the current gradients.
    Per-round training MSE is kept in ``train_loss_`` (index 0 is the base).
    """

    _state_attrs = ("trees_", "base_score_", "n_features_in_")

    def __init__(self, n_estimators=100, learning_rate=0.3, max_depth=6, reg_lambda=1.0,
                 gamma=0.0, min_child_weight=1.0, subsample=1.0, colsample_bytree=1.0,
                 random_state=0):
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.reg_lambda = reg_lambda
        self.gamma = gamma
        self.min_child_weight = min_child_weight
        self.subsample = subsample
        self.colsample_bytree = colsample_bytree
        self.random_state = random_state

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        n, p = X.shape
        rng = np.random.default_rng(self.random_state)
        self.base_score_ = float(y.mean())
        pred = np.full(n, self.base_score_)
        h = np.ones(n)
        trees = []
        self.train_loss_ = [float(np.mean((pred - y) ** 2))]
        for _ in range(self.n_estimators):
            g = pred - y
            rows = None
            if self.subsample < 1.0:
                m = max(1, int(round(self.subsample * n)))
                rows = np.sort(rng.choice(n, size=m, replace=False))
            Xt = X
            col_map = None
            if self.colsample_bytree < 1.0:
                m = max(1, int(round(self.colsample_bytree * p)))
                col_map = np.sort(rng.choice(p, size=m, replace=False))
                Xt = X[:, col_map]
            tree = grow_tree(Xt, g, h, max_depth=self.max_depth,
                             min_child_weight=self.min_child_weight,
                             reg_lambda=self.reg_lambda, gamma=self.gamma, rows=rows)
            if col_map is not None:
                tree.feature = np.where(tree.feature >= 0, col_map[np.maximum(tree.feature, 0)], -1)
            pred = pred + self.learning_rate * tree.predict(X)
            trees.append(tree)
            self.train_loss_.append(float(np.mean((pred - y) ** 2)))
        self._trees = trees
        self.trees_ = [t.to_state() for t in trees]
        return self

    def set_state(self, state):
        super().set_state(state)
        self._trees = [Tree.from_state(s) for s in self.trees_]
        return self

    def predict(self, X):
        X = self._validate_predict(X)
        out = np.full(X.shape[0], self.base_score_)
        for t in self._trees:
            out = out + self.learning_rate * t.predict(X)
        return out
