"""The twelve acceptance criteria, one test each.

Every test records a PASS/FAIL line, printed at the end of the pytest run.
"""

import contextlib
import itertools
import json
import math
import shutil
import time
from math import comb
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from chlmap import pipeline
from chlmap.cli import main
from chlmap.config import load_config
from chlmap.evaluation import (cross_validate, evaluate_ensemble, make_split_plan, r2, rmse,
                               stratified_kfold)
from chlmap.features import (FAMILIES, FeatureTable, all_indices, enumerate_indices,
                             features_from_means, get_reflectance_set, index_matrix, window_mean,
                             window_means)
from chlmap.mapping import read_predictions_csv
from chlmap.models import (ElasticNet, default_spec, fit_elastic_net, fit_knn, fit_linear,
                           fit_random_forest, load_model)
from chlmap.models.mlp import MLPRegressor, loss_and_grads
from chlmap.models.trees import GradientBoostingRegressor
from chlmap.raster import GeoTransform, rasterize_polygon, read_band_stack
from chlmap.synthetic import make_synthetic_project

from conftest import ACCEPTANCE, LIGHT_PARAMS, make_stack

FIXTURES = Path(__file__).parent / "fixtures"


@contextlib.contextmanager
def criterion(n, title):
    ok = False
    try:
        yield
        ok = True
    finally:
        ACCEPTANCE[n] = (title, ok)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")


# -- 1 ----------------------------------------------------------------------

def _r2_oracle(y, yhat):
    mean = math.fsum(y) / len(y)
    ss_res = math.fsum((a - b) ** 2 for a, b in zip(y, yhat))
    ss_tot = math.fsum((a - mean) ** 2 for a in y)
    return 1.0 - ss_res / ss_tot


def _rmse_oracle(y, yhat):
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(y, yhat)) / len(y))


def test_01_metric_oracle():
    with criterion(1, "metric oracle (r2, rmse) on 1000 random pairs"):
        rng = np.random.default_rng(1)
        cases = []
        for _ in range(1000):
            n = int(rng.integers(2, 60))
            y = rng.normal(5, 3, size=n)
            cases.append((y, y + rng.normal(0, rng.uniform(0.01, 5), size=n)))
        t0 = time.perf_counter()
        got = [(r2(y, p), rmse(y, p), r2(y, y), rmse(y, y)) for y, p in cases]
        elapsed = time.perf_counter() - t0
        for (y, p), (a, b, same_r2, same_rmse) in zip(cases, got):
            ra, rb = _r2_oracle(y.tolist(), p.tolist()), _rmse_oracle(y.tolist(), p.tolist())
            assert abs(a - ra) <= 1e-12 * max(1.0, abs(ra))
            assert abs(b - rb) <= 1e-12 * rb
            assert same_r2 == 1.0 and same_rmse == 0.0
        assert elapsed < 1.0


# -- 2 ----------------------------------------------------------------------

def _closed_form(family, n):
    pairs = comb(n, 2)
    return {"ND": pairs, "InvDiff": pairs, "DallGitelson": pairs * (n - 2),
            "ND4": pairs * (comb(n, 2) + n - 1), "RatioDiff": comb(n * (n - 1), 2) - n * comb(n - 1, 2),
            "ThreeBandSum": comb(n, 3)}[family]


def _near_matches(V, tol):
    """Pairs of columns equal (sign=+1) or negated (sign=-1) on every row within tol."""
    found = []
    key = V[0]
    order = np.argsort(key, kind="stable")
    sk = key[order]
    for sign in (1.0, -1.0):
        target = sign * key
        lo = np.searchsorted(sk, target - tol, side="left")
        hi = np.searchsorted(sk, target + tol, side="right")
        for i in np.flatnonzero(hi > lo):
            for j in order[lo[i]:hi[i]]:
                if j <= i and sign > 0:
                    continue
                if np.all(np.abs(V[:, i] - sign * V[:, j]) <= tol):
                    found.append((int(i), int(j), sign))
    return found


def test_02_index_enumeration():
    with criterion(2, "index family counts and no duplicate/negated features"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        assert len(enumerate_indices("ND", get_reflectance_set("C2X_rhown"))) == 15
        assert len(enumerate_indices("ThreeBandSum", get_reflectance_set("C2X_rhown"))) == 20
        for name, n in (("C2X_rhown", 6), ("C2X_rhow", 9), ("TOA", 12)):
            rset = get_reflectance_set(name)
            assert len(rset.band_names) == n
            for fam in FAMILIES:
                assert len(enumerate_indices(fam, rset)) == _closed_form(fam, n), (name, fam)
            idx = all_indices(rset)
            assert len({ix.canonical_name for ix in idx}) == len(idx)
            vals = rng.uniform(0.001, 0.2, size=(1000, n))
            V = np.hstack([vals, index_matrix(idx, vals, rset.band_names)])
            assert np.isfinite(V).all()
            assert _near_matches(V, 1e-12) == []
        assert time.perf_counter() - t0 < 10.0


# -- 3 ----------------------------------------------------------------------

def test_03_window_aggregation():
    with criterion(3, "window_mean equals brute-force masked mean on 10,000 cases"):
        rng = np.random.default_rng(3)
        cases = 0
        while cases < 10_000:
            h, w = int(rng.integers(1, 25)), int(rng.integers(1, 25))
            data = rng.normal(size=(2, h, w))
            data[rng.uniform(size=data.shape) < rng.uniform(0, 0.6)] = np.nan
            s = make_stack(list(data), ["a", "b"])
            for _ in range(50):
                win = int(rng.choice([1, 3, 5, 7, 9, 15, 21]))
                r, c = int(rng.integers(0, h)), int(rng.integers(0, w))
                got = window_mean(s, (r, c), win, ["a", "b"])
                k = win // 2
                for b in range(2):
                    vals = [float(s.data[b, i, j])
                            for i in range(max(r - k, 0), min(r + k + 1, h))
                            for j in range(max(c - k, 0), min(c + k + 1, w))
                            if not math.isnan(s.data[b, i, j])]
                    if vals:
                        ref = math.fsum(vals) / len(vals)
                        assert abs(got[b] - ref) <= 1e-12 * max(1.0, abs(ref))
                    else:
                        assert math.isnan(got[b])
                cases += 1


# -- 4 ----------------------------------------------------------------------

def _crossing_oracle(rings, px, py):
    """Even-odd ray casting per ring; inside the first ring and outside the rest."""
    def inside(ring):
        hit = np.zeros(px.shape, dtype=bool)
        for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
            straddle = (y1 > py) != (y2 > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            hit ^= straddle & (xint > px)
        return hit

    out = inside(rings[0])
    for hole in rings[1:]:
        out &= ~inside(hole)
    return out


def test_04_geometry():
    with criterion(4, "rasterize_polygon equals point-in-polygon on 100 random polygons"):
        rng = np.random.default_rng(4)
        s = make_stack([np.zeros((64, 64))], transform=GeoTransform(100.0, 200.0, 0.5, -0.5))
        cx = 100.0 + (np.arange(64) + 0.5) * 0.5
        cy = 200.0 - (np.arange(64) + 0.5) * 0.5
        px, py = np.meshgrid(cx, cy)
        for _ in range(100):
            rings = []
            for _ in range(int(rng.integers(1, 4))):
                m = int(rng.integers(3, 12))
                pts = np.column_stack([rng.uniform(95, 137, m), rng.uniform(163, 205, m)]).tolist()
                rings.append(pts + [pts[0]])
            got = rasterize_polygon(rings, s)
            assert np.array_equal(got, _crossing_oracle(rings, px, py))


# -- 5 ----------------------------------------------------------------------

def test_05_model_unit_suites():
    with criterion(5, "model suites: OLS, ELN, KNN, GBT, RF, MLP gradient"):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(80, 6))
        beta = rng.normal(size=6)
        y = X @ beta + 1.5
        ols = fit_linear(X, y).estimator
        assert np.abs(ols.coef_ - beta).max() < 1e-10 and abs(ols.intercept_ - 1.5) < 1e-10

        yn = y + rng.normal(scale=0.3, size=80)
        e0 = fit_elastic_net(X, yn, alpha=0.0, tol=1e-13, max_iter=100000).estimator
        assert np.abs(e0.coef_ - fit_linear(X, yn).estimator.coef_).max() < 1e-6
        Xc, yc = X - X.mean(0), yn - yn.mean()
        for l1 in (1.0, 0.5):
            bound = np.abs(Xc.T @ yc).max() / (len(yn) * l1)
            assert not np.any(ElasticNet(alpha=bound, l1_ratio=l1).fit(X, yn).coef_)
            assert np.any(ElasticNet(alpha=0.98 * bound, l1_ratio=l1).fit(X, yn).coef_)

        m = fit_knn(np.array([[0.0], [3.0], [10.0]]), np.array([0.0, 3.0, 7.0]), k=2)
        assert m.predict(np.array([[1.0]]), m.feature_names)[0] == 1.0

        g = GradientBoostingRegressor(n_estimators=50, learning_rate=0.3, max_depth=4).fit(X, yn)
        assert len(g.train_loss_) == 51 and np.all(np.diff(g.train_loss_) <= 0)

        a = fit_random_forest(X, yn, n_trees=15, max_features=0.5, seed=11)
        b = fit_random_forest(X, yn, n_trees=15, max_features=0.5, seed=11)
        Q = rng.normal(size=(40, 6))
        assert a.predict(Q, a.feature_names).tobytes() == b.predict(Q, b.feature_names).tobytes()
        assert a.hash() == b.hash()

        Xb, yb = rng.normal(size=(5, 4)), rng.normal(size=5)
        for act in ("tanh", "relu"):
            params = MLPRegressor(hidden_layer_sizes=(7, 5)).init_params(4, rng)
            _, grads = loss_and_grads(params, Xb, yb, act, 1e-3)
            worst = 0.0
            for p, gr in zip(params, grads):
                for i in itertools.product(*[range(d) for d in p.shape]):
                    old = p[i]
                    p[i] = old + 1e-6
                    lp, _ = loss_and_grads(params, Xb, yb, act, 1e-3)
                    p[i] = old - 1e-6
                    lm, _ = loss_and_grads(params, Xb, yb, act, 1e-3)
                    p[i] = old
                    num = (lp - lm) / 2e-6
                    worst = max(worst, abs(num - gr[i]) / max(abs(num), abs(gr[i]), 1e-7))
            assert worst < 1e-4, (act, worst)


# -- 6 ----------------------------------------------------------------------

def _random_table(rng, n=90, p=40, raw=4):
    X = rng.uniform(0.01, 0.1, size=(n, p))
    y = 50 * (X[:, 5] - X[:, 6]) + 4 + rng.normal(0, 0.3, size=n)
    names = [f"rhow_B{i}" for i in range(raw)] + [f"ND:x{i}:y{i}" for i in range(p - raw)]
    keys = pd.DataFrame({"Date": np.arange(n), "Buoy": ["CTD-1"] * n})
    return FeatureTable("C2X_rhow_1x1_depth_in_0_1", keys, names, X, y, 0, tuple(names[:raw]))


def test_06_leakage_guard():
    with criterion(6, "test-row targets never reach a fold model"):
        rng = np.random.default_rng(6)
        table = _random_table(rng)
        plan = make_split_plan(table.y, seed=6)
        y2 = table.y.copy()
        y2[plan.test_rows] = rng.uniform(100, 200, size=plan.test_rows.size)
        other = FeatureTable(table.dataset_id, table.keys, table.feature_names, table.X, y2, 0,
                             table.raw_bands)
        for label in ("LR", "Ridge", "ELN", "KNN", "RF", "XGB", "MLP"):
            spec = default_spec(label, seed=3).with_params(**LIGHT_PARAMS.get(label, {}))
            a = cross_validate(spec, table, plan, top_k=10)
            b = cross_validate(spec, other, plan, top_k=10)
            assert a.report.ok and b.report.ok
            assert a.report.meta["model_hashes"] == b.report.meta["model_hashes"], label
            assert a.fold_features == b.fold_features
            assert np.array_equal(a.oof, b.oof, equal_nan=True)


# -- 7 ----------------------------------------------------------------------

def test_07_stratification():
    with criterion(7, "per-fold High_Chl counts and fold sizes differ by at most 1"):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(5, 400))
            labels = rng.uniform(size=n) < rng.uniform(0, 1)
            k = int(rng.integers(2, min(n, 10) + 1))
            fold = stratified_kfold(labels, k, seed=int(rng.integers(1 << 30)))
            sizes = np.bincount(fold, minlength=k)
            highs = np.bincount(fold[labels], minlength=k)
            assert sizes.max() - sizes.min() <= 1
            assert highs.max() - highs.min() <= 1


# -- 8 ----------------------------------------------------------------------

def test_08_ensemble_pass_through():
    with criterion(8, "ridge stacking passes a single base through; beats the noise model"):
        rng = np.random.default_rng(8)
        n = 120
        X = rng.uniform(size=(n, 3))
        y = X @ np.array([3.0, -1.0, 2.0]) * 4 + 6
        keys = pd.DataFrame({"Date": np.arange(n), "Buoy": ["CTD-1"] * n})
        table = FeatureTable("d_1x1_depth_in_0_1", keys, ["a", "b", "c"], X, y, 0, ("a", "b", "c"))
        plan = make_split_plan(y, seed=8)
        base = cross_validate(default_spec("LR"), table, plan)
        tr = plan.train_rows
        ens = evaluate_ensemble(base.oof[tr], y[tr], plan.fold[tr], base.test_pred, y[plan.test_rows],
                                lambda_l2=1e-9)
        assert np.abs(ens.oof - base.oof[tr]).max() < 1e-6
        assert np.abs(ens.test_pred - base.test_pred).max() < 1e-6

        f = np.sin(np.linspace(0, 6, 200)) * 3 + 5
        target = f + rng.normal(0, 0.2, size=200)
        noisy = f + rng.normal(0, 2.0, size=200)
        folds = np.arange(200) % 5
        res = evaluate_ensemble(np.column_stack([f, noisy]), target, folds, np.empty((0, 2)), lambda_l2=1.0)
        noise_rmse = float(np.mean([rmse(target[folds == k], noisy[folds == k]) for k in range(5)]))
        assert res.report.val_rmse <= noise_rmse


# -- 9 ----------------------------------------------------------------------

def test_09_synthetic_end_to_end(e2e_project):
    with criterion(9, "synthetic run: LR and GBT test R2 >= 0.99, map equals direct predictions"):
        cfg = e2e_project["cfg"]
        out = Path(cfg["paths"]["output_dir"])
        doc = json.loads((out / "train" / "reports.json").read_text())
        final = {r["model"]: r for r in doc["final"]}
        assert final["LR"]["test_r2"] >= 0.99
        assert final["XGB"]["test_r2"] >= 0.99 and final["XGB"]["kind"] == "GBT"

        sel = json.loads((out / "select" / "selection.json").read_text())["0-1"]
        model = load_model(out / "select" / sel["model_file"])
        rset = get_reflectance_set("C2X-Complex_rhow")
        scene = pipeline.load_scene(e2e_project["root"] / "scenes" / "C2X-Complex_2018-01-08.bsf", cfg)
        mask = pipeline._map_mask(cfg, scene)
        rows, cols = np.nonzero(mask)
        feats = features_from_means(window_means(scene, rows, cols, 1, rset.band_names), rset)
        names = list(rset.band_names) + [ix.canonical_name for ix in all_indices(rset)]
        ok = np.isfinite(feats[:, [names.index(f) for f in model.feature_names]]).all(axis=1)
        direct = np.full(rows.size, np.nan)
        direct[ok] = np.maximum(model.predict(feats[ok], names), 0.0)

        mdir = out / "infer" / "2018-01-08"
        grid = read_predictions_csv(mdir / "chl_0-1.csv", (scene.height, scene.width))
        assert np.isnan(grid[~mask]).all()
        got = grid[rows, cols]
        assert np.array_equal(np.isnan(got), np.isnan(direct))
        assert np.nanmax(np.abs(got - direct)) <= 1e-9
        bsf = read_band_stack(mdir / "chl_0-1.bsf").data[0]
        assert np.array_equal(bsf[rows, cols], direct.astype(np.float32), equal_nan=True)
        assert (mdir / "chl_0-1.png").exists() and (mdir / "chl_0-1.tif").exists()
        assert e2e_project["seconds"] < 120


# -- 10 ---------------------------------------------------------------------

def test_10_grid_cardinality(tmp_path):
    with criterion(10, "full default grid emits 140 dataset files"):
        cfg_path = make_synthetic_project(tmp_path, n_dates=1, cloudy_extra=False)
        cfg = load_config(cfg_path)
        pipeline.cmd_ingest(cfg)
        res = pipeline.cmd_features(cfg)
        files = sorted((tmp_path / "out" / "features").glob("*_depth_in_*.csv"))
        assert len(files) == 140 == len(res["datasets"])
        listing = json.loads((tmp_path / "out" / "features" / "datasets.json").read_text())
        assert len(listing) == 140 and all(v["rows"] == 12 for v in listing.values())


# -- 11 ---------------------------------------------------------------------

def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_determinism_under_threads(tmp_path):
    with criterion(11, "--threads 1 and --threads 8 give identical reports and maps"):
        cfg_path = make_synthetic_project(tmp_path, n_dates=10, processors=["C2RCC", "C2X-Complex"],
                                          config_overrides={
            "reflectance_sets": ["TOA", "C2X-Complex_rhow"], "windows": [1, 3],
            "depth_bins": ["0-1", "2-3"], "models": ["LR", "ELN", "KNN", "RF", "XGB", "MLP"],
            "model_params": {k: LIGHT_PARAMS[k] for k in ("RF", "XGB", "MLP")}, "top_k": 15, "chunk_rows": 8,
            "search": {"budget": 2, "spaces": {
                "KNN": {"n_neighbors": {"type": "int", "low": 1, "high": 6}},
                "RF": {"max_depth": {"type": "int", "low": 2, "high": 5}}}}})
        out = tmp_path / "out"
        assert main(["--config", str(cfg_path), "--threads", "1", "run", "--date", "2018-01-08"]) == 0
        one = _tree_bytes(out)
        shutil.rmtree(out)
        assert main(["--config", str(cfg_path), "--threads", "8", "run", "--date", "2018-01-08"]) == 0
        eight = _tree_bytes(out)
        assert sorted(one) == sorted(eight)
        for stage in ("train/reports.json", "report/test_r2_depth_0-1.csv",
                      "infer/2018-01-08/chl_0-1.bsf", "infer/2018-01-08/chl_2-3.csv"):
            assert stage in one
        diff = [k for k in one if one[k] != eight[k]]
        assert diff == []


# -- 12 ---------------------------------------------------------------------

def test_12_report_fidelity(report_project):
    with criterion(12, "report matrices match the golden 10 x 10 layout"):
        out = Path(report_project["cfg"]["paths"]["output_dir"]) / "report"
        header = "Dataset,CAT,ELN,ENS,KNN,LBM,LR,MLP,RF,SVR,XGB"
        for depth in ("0-1", "2-3"):
            for metric in ("test_r2", "test_rmse"):
                name = f"{metric}_depth_{depth}.csv"
                lines = (out / name).read_text().splitlines()
                assert lines[0] == header
                assert len(lines) == 11
                cells = [ln.split(",") for ln in lines[1:]]
                assert all(len(c) == 11 for c in cells)
                assert all(c[9] == "NA" for c in cells)
                assert all(c[3] != "NA" for c in cells)
                assert len({c[0] for c in cells}) == 10
                assert (out / name).read_text() == (FIXTURES / "report" / name).read_text()
        doc = json.loads((out / "report.json").read_text())
        assert doc["unsupported"] == {"SVR": "out of scope"}
        assert doc["substitutions"]["XGB"] == "gbt-as-xgb"
