"""Splitting, cross-validation with out-of-fold bookkeeping, stacking and ranking."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ChlmapError, DomainError, UndefinedMetricError
from .features import FeatureTable, parse_dataset_id, screen_features
from .models import ModelSpec, fit_model
from .models.linear import Ridge

log = logging.getLogger(__name__)

N_FOLDS = 5
HIGH_CHL_THRESHOLD = 5.0


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def r2(y, yhat) -> float:
    """Coefficient of determination against the mean of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("y and yhat differ in length")
    if y.size < 2:
        raise UndefinedMetricError("R2 needs at least two observations")
    dev = y - y.mean()
    ss_tot = float(dev @ dev)
    if ss_tot == 0.0:
        raise UndefinedMetricError("R2 is undefined for a constant target")
    res = y - yhat
    return 1.0 - float(res @ res) / ss_tot


def rmse(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("y and yhat differ in length")
    if y.size == 0:
        raise UndefinedMetricError("RMSE of an empty vector")
    res = y - yhat
    return math.sqrt(float(res @ res) / y.size)


def _safe_r2(y, yhat):
    try:
        return r2(y, yhat)
    except UndefinedMetricError:
        return None


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def label_high_chl(y, threshold: float = HIGH_CHL_THRESHOLD) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) > threshold


def threshold_quantile(y, threshold: float = HIGH_CHL_THRESHOLD) -> float | None:
    """Share of samples at or below ``threshold`` (its empirical quantile)."""
    y = np.asarray(y, dtype=np.float64)
    return float((y <= threshold).mean()) if y.size else None


def _allocate(sizes: dict, total: int) -> dict:
    """Largest-remainder apportionment of ``total`` across classes.

    Leftover units go to the largest fractional parts; ties favour the
    smaller class, then the class label order.
    """
    n = sum(sizes.values())
    quota = {c: total * s / n for c, s in sizes.items()}
    alloc = {c: int(math.floor(q)) for c, q in quota.items()}
    left = total - sum(alloc.values())
    order = sorted(sizes, key=lambda c: (-(quota[c] - alloc[c]), sizes[c], c))
    for c in order[:left]:
        alloc[c] += 1
    return alloc


def stratified_split(labels, test_fraction: float = 0.25, seed: int = 0) -> np.ndarray:
    """Row positions of the test part, sorted.

    The test size is ``ceil(test_fraction * n)``, shared across classes in
    proportion to their sizes. Rows are drawn from a seeded per-class shuffle.
    If any class has fewer than 2 rows the split ignores the labels.
    """
    labels = np.asarray(labels, dtype=bool)
    n = labels.size
    if not 0 < test_fraction < 1:
        raise DomainError("test_fraction must lie in (0, 1)")
    n_test = int(math.ceil(test_fraction * n - 1e-12))
    rng = np.random.default_rng(seed)
    classes = {c: np.flatnonzero(labels == c) for c in (False, True)}
    classes = {c: ix for c, ix in classes.items() if ix.size}
    if any(ix.size < 2 for ix in classes.values()):
        return np.sort(rng.permutation(n)[:n_test])
    alloc = _allocate({c: ix.size for c, ix in classes.items()}, n_test)
    picked = [rng.permutation(classes[c])[:alloc[c]] for c in sorted(classes)]
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=np.int64)


def stratified_kfold(labels, k: int = N_FOLDS, seed: int = 0) -> np.ndarray:
    """Fold index per row.

    Per-class shuffled row lists are concatenated and dealt round-robin, so
    both per-class counts and fold sizes differ by at most one across folds.
    """
    labels = np.asarray(labels, dtype=bool)
    n = labels.size
    if k < 2 or k > n:
        raise DomainError(f"cannot make {k} folds from {n} rows")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in (False, True)])
    fold = np.empty(n, dtype=np.int64)
    fold[order] = np.arange(n) % k
    return fold


@dataclass
class SplitPlan:
    """Test rows plus fold ids for the training rows (-1 marks test rows)."""

    test_rows: np.ndarray
    fold: np.ndarray
    seed: int
    labels: np.ndarray
    k: int = N_FOLDS

    @property
    def n_rows(self) -> int:
        return self.fold.size

    @property
    def train_rows(self) -> np.ndarray:
        return np.flatnonzero(self.fold >= 0)

    def fold_rows(self, f: int):
        """(training rows, validation rows) for fold ``f``."""
        return np.flatnonzero((self.fold >= 0) & (self.fold != f)), np.flatnonzero(self.fold == f)

    def to_dict(self):
        return {"seed": self.seed, "k": self.k, "test_rows": self.test_rows.tolist(),
                "fold": self.fold.tolist(), "labels": self.labels.astype(int).tolist()}


def make_split_plan(y, seed: int = 0, threshold: float = HIGH_CHL_THRESHOLD,
                    test_fraction: float = 0.25, k: int = N_FOLDS) -> SplitPlan:
    labels = label_high_chl(y, threshold)
    test = stratified_split(labels, test_fraction, seed)
    fold = np.full(labels.size, -1, dtype=np.int64)
    train = np.setdiff1d(np.arange(labels.size), test)
    fold[train] = stratified_kfold(labels[train], k, seed)
    return SplitPlan(test, fold, seed, labels, k)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    dataset_id: str
    model: str
    kind: str
    status: str = "ok"
    error: str | None = None
    fold_metrics: list = field(default_factory=list)
    val_r2: float | None = None
    val_rmse: float | None = None
    test_r2: float | None = None
    test_rmse: float | None = None
    hyperparameters: dict = field(default_factory=dict)
    n_train: int = 0
    n_test: int = 0
    n_dropped: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CVResult:
    report: EvalReport
    oof: np.ndarray            # per table row; NaN on test rows
    test_pred: np.ndarray      # mean of the fold models' test predictions
    fold_test_preds: list
    fold_models: list
    fold_features: list


def _aggregate(fold_metrics):
    r2s = [m["r2"] for m in fold_metrics if m["r2"] is not None]
    rm = [m["rmse"] for m in fold_metrics]
    return (float(np.mean(r2s)) if r2s else None), (float(np.mean(rm)) if rm else None)


def cross_validate(spec: ModelSpec, table: FeatureTable, plan: SplitPlan, top_k: int | None = None,
                   n_jobs: int = 1) -> CVResult:
    """K-fold CV on the plan's training rows with a fold-averaged test prediction.

    Scaling statistics and feature screening see only each fold's training
    rows. A fold failure marks the whole report failed.
    """
    if table.y is None:
        raise ChlmapError("cross-validation needs a target")
    if plan.n_rows != len(table):
        raise ChlmapError("split plan was built for a different table")
    y = table.y
    test = plan.test_rows

    def run_fold(f):
        tr, va = plan.fold_rows(f)
        names = list(table.feature_names) if top_k is None else screen_features(table, tr, top_k)
        X = table.columns(names)
        model = fit_model(spec, X[tr], y[tr], names)
        return model, names, model.predict(X[va], names), model.predict(X[test], names)

    report = EvalReport(table.dataset_id, spec.label, spec.kind, hyperparameters=dict(spec.params),
                        n_train=int(plan.train_rows.size), n_test=int(test.size),
                        n_dropped=table.n_dropped, seed=spec.seed,
                        meta={"high_chl_quantile": threshold_quantile(y[plan.train_rows])})
    oof = np.full(len(table), np.nan)
    try:
        if n_jobs > 1:
            with ThreadPoolExecutor(min(n_jobs, plan.k)) as ex:
                outs = list(ex.map(run_fold, range(plan.k)))
        else:
            outs = [run_fold(f) for f in range(plan.k)]
    except Exception as exc:  # any learner failure is reported, not raised
        log.warning("%s / %s failed: %s", table.dataset_id, spec.label, exc)
        report.status = "failed"
        report.error = f"{type(exc).__name__}: {exc}"
        return CVResult(report, oof, np.full(test.size, np.nan), [], [], [])

    fold_test = []
    for f, (model, names, pv, pt) in enumerate(outs):
        _, va = plan.fold_rows(f)
        oof[va] = pv
        fold_test.append(pt)
        report.fold_metrics.append({"fold": f, "n": int(va.size), "r2": _safe_r2(y[va], pv),
                                    "rmse": rmse(y[va], pv)})
    report.val_r2, report.val_rmse = _aggregate(report.fold_metrics)
    test_pred = np.mean(np.vstack(fold_test), axis=0) if test.size else np.empty(0)
    if test.size:
        report.test_r2 = _safe_r2(y[test], test_pred)
        report.test_rmse = rmse(y[test], test_pred)
    models = [o[0] for o in outs]
    for key in ("substitution",):
        if key in models[0].metadata:
            report.meta[key] = models[0].metadata[key]
    report.meta["model_hashes"] = [m.hash() for m in models]
    return CVResult(report, oof, test_pred, fold_test, models, [o[1] for o in outs])


# ---------------------------------------------------------------------------
# Stacking
# ---------------------------------------------------------------------------

@dataclass
class EnsembleResult:
    report: EvalReport
    oof: np.ndarray
    test_pred: np.ndarray
    weights: np.ndarray
    intercept: float


def evaluate_ensemble(oof, y_train, folds, test_preds, y_test=None, lambda_l2: float = 1.0,
                      dataset_id: str = "", base_models=()) -> EnsembleResult:
    """Ridge stacking over base-model out-of-fold predictions.

    ``oof`` is (train rows x base models), ``folds`` the fold id of each of
    those rows. Each fold's meta-model is fit on the other folds and scored
    on the held-out one. The test meta-model is refit on all OOF rows.
    """
    oof = np.asarray(oof, dtype=np.float64)
    if oof.ndim == 1:
        oof = oof[:, None]
    y_train = np.asarray(y_train, dtype=np.float64)
    folds = np.asarray(folds)
    test_preds = np.asarray(test_preds, dtype=np.float64).reshape(-1, oof.shape[1])
    if oof.shape[1] < 2:
        log.warning("ensemble over a single base model is degenerate")
    report = EvalReport(dataset_id, "ENS", "Ridge", hyperparameters={"alpha": lambda_l2},
                        n_train=int(y_train.size), n_test=int(test_preds.shape[0]),
                        meta={"base_models": list(base_models),
                              "test_meta_model": "refit on all out-of-fold rows"})
    ens_oof = np.full(y_train.size, np.nan)
    for f in np.unique(folds):
        tr, va = folds != f, folds == f
        meta = Ridge(alpha=lambda_l2).fit(oof[tr], y_train[tr])
        ens_oof[va] = meta.predict(oof[va])
        report.fold_metrics.append({"fold": int(f), "n": int(va.sum()),
                                    "r2": _safe_r2(y_train[va], ens_oof[va]),
                                    "rmse": rmse(y_train[va], ens_oof[va])})
    report.val_r2, report.val_rmse = _aggregate(report.fold_metrics)
    full = Ridge(alpha=lambda_l2).fit(oof, y_train)
    test_pred = full.predict(test_preds) if test_preds.shape[0] else np.empty(0)
    if y_test is not None and len(y_test):
        report.test_r2 = _safe_r2(y_test, test_pred)
        report.test_rmse = rmse(y_test, test_pred)
    report.meta["weights"] = full.coef_.tolist()
    report.meta["intercept"] = full.intercept_
    return EnsembleResult(report, ens_oof, test_pred, full.coef_, full.intercept_)


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def processor_of(ds_id: str) -> str:
    set_name = parse_dataset_id(ds_id)[0]
    return "TOA" if set_name == "TOA" else set_name.rsplit("_", 1)[0]


def dataset_scores(reports) -> dict:
    """dataset_id -> (best validation R2, RMSE of that best model)."""
    best: dict = {}
    for rep in reports:
        if not rep.ok or rep.val_r2 is None:
            continue
        cur = best.get(rep.dataset_id)
        cand = (rep.val_r2, rep.val_rmse if rep.val_rmse is not None else math.inf)
        if cur is None or cand[0] > cur[0] or (cand[0] == cur[0] and cand[1] < cur[1]):
            best[rep.dataset_id] = cand
    return best


def rank_datasets(reports, per_processor_top: int | None = 10, group=processor_of) -> list[str]:
    """Dataset ids ranked by their best validation R2 across models.

    Ties go to the lower RMSE of the best model, then to the id. With
    ``per_processor_top`` set, only that many survive per processing chain.
    """
    scores = dataset_scores(reports)
    ranked = sorted(scores, key=lambda d: (-scores[d][0], scores[d][1], d))
    if per_processor_top is None:
        return ranked
    kept, seen = [], {}
    for d in ranked:
        g = group(d)
        if seen.get(g, 0) < per_processor_top:
            seen[g] = seen.get(g, 0) + 1
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------

def sample_params(space: dict, rng: np.random.Generator) -> dict:
    """One draw from a search space.

    Each entry is either a fixed value or a dict with ``type`` in
    ``int | float | log | choice | layers``.
    """
    out = {}
    for name in sorted(space):
        s = space[name]
        if not isinstance(s, dict):
            out[name] = s
            continue
        t = s["type"]
        if t == "int":
            out[name] = int(rng.integers(s["low"], s["high"] + 1))
        elif t == "float":
            out[name] = float(rng.uniform(s["low"], s["high"])) if s["high"] > s["low"] else float(s["low"])
        elif t == "log":
            lo, hi = math.log(s["low"]), math.log(s["high"])
            out[name] = float(math.exp(rng.uniform(lo, hi))) if hi > lo else float(s["low"])
        elif t == "choice":
            out[name] = s["values"][int(rng.integers(len(s["values"])))]
        elif t == "layers":
            depth = int(rng.integers(s["min_layers"], s["max_layers"] + 1))
            out[name] = [int(rng.integers(s["low"], s["high"] + 1)) for _ in range(depth)]
        else:
            raise ValueError(f"unknown search type {t!r} for {name}")
    return out


@dataclass
class SearchResult:
    best_params: dict
    best_score: float
    trials: list


def random_search(spec: ModelSpec, space: dict, budget: int, table: FeatureTable, plan: SplitPlan,
                  seed: int = 0, top_k: int | None = None, n_jobs: int = 1) -> SearchResult:
    """Seeded random search maximising mean validation R2."""
    if budget < 1:
        raise DomainError("search budget must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    best = None
    for t in range(budget):
        params = sample_params(space, rng)
        res = cross_validate(spec.with_params(**params), table, plan, top_k, n_jobs)
        score = res.report.val_r2 if res.report.ok else None
        trials.append({"trial": t, "params": params, "score": score, "status": res.report.status})
        if score is not None and (best is None or score > best[1]):
            best = (params, score)
    if best is None:
        raise ChlmapError(f"all {budget} search trials failed for {spec.label} on {table.dataset_id}")
    return SearchResult(best[0], best[1], trials)


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1)


def reports_from_json(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)]
