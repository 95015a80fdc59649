import datetime as dt
import itertools
from math import comb

import numpy as np
import pandas as pd
import pytest

from chlmap.errors import ContractError, DomainError, SchemaError
from chlmap.features import (FAMILIES, REFLECTANCE_SETS, FeatureTable, SpectralIndex, all_indices, subset_set,
                             build_dataset, dataset_id, enumerate_indices, eval_index,
                             feature_names_for, get_reflectance_set, index_matrix,
                             parse_dataset_id, read_feature_table, screen_features, window_mean,
                             window_means, window_means_grid, write_feature_table)
from chlmap.raster import GeoTransform

from conftest import make_stack


def closed_form(family, n):
    pairs = comb(n, 2)
    return {
        "ND": pairs,
        "InvDiff": pairs,
        "DallGitelson": pairs * (n - 2),
        "ND4": pairs * (n * (n + 1) // 2 - 1),
        "RatioDiff": comb(n * (n - 1), 2) - n * comb(n - 1, 2),
        "ThreeBandSum": comb(n, 3),
    }[family]


def test_spec_examples_for_six_bands():
    r = get_reflectance_set("C2RCC_rhown")
    assert len(enumerate_indices("ND", r)) == 15
    assert len(enumerate_indices("ThreeBandSum", r)) == 20


def test_total_feature_counts():
    for name, n in (("C2X_rhow", 9), ("TOA", 12), ("C2X_rhown", 6)):
        expect = n + sum(closed_form(f, n) for f in FAMILIES)
        assert len(feature_names_for(get_reflectance_set(name))) == expect
    assert len(all_indices(get_reflectance_set("C2X_rhow"))) == 4296


def test_dall_gitelson_value():
    ix = SpectralIndex("DallGitelson", ("a", "b", "c"))
    assert eval_index(ix, {"a": 0.02, "b": 0.05, "c": 0.1}) == pytest.approx(3.0, abs=1e-12)


def test_guards_give_nan():
    assert np.isnan(eval_index(SpectralIndex("ND", ("a", "b")), {"a": 0.0, "b": 0.0}))
    assert np.isnan(eval_index(SpectralIndex("InvDiff", ("a", "b")), {"a": -0.1, "b": 0.2}))
    assert np.isnan(eval_index(SpectralIndex("RatioDiff", ("a", "b", "c", "d")),
                               {"a": 1, "b": 0, "c": 1, "d": 1}))


def test_index_matrix_matches_scalar(rng):
    rset = get_reflectance_set("C2X_rhown")
    idx = all_indices(rset)
    vals = rng.uniform(0.001, 0.1, size=(4, 6))
    m = index_matrix(idx, vals, rset.band_names)
    for k in rng.integers(0, len(idx), size=50):
        d = dict(zip(rset.band_names, vals[1]))
        assert m[1, k] == eval_index(idx[k], d)


def test_unknown_family_and_small_sets():
    with pytest.raises(DomainError):
        enumerate_indices("NDVI", get_reflectance_set("TOA"))
    with pytest.raises(DomainError):
        get_reflectance_set("nope")


def test_dataset_ids():
    i = dataset_id("C2X-Complex_rhow", 9, "0-1")
    assert i == "C2X-Complex_rhow_9x9_depth_in_0_1"
    assert parse_dataset_id(i) == ("C2X-Complex_rhow", 9, "0-1")


def test_window_mean_small_cases():
    a = np.arange(25, dtype=float).reshape(5, 5)
    a[2, 2] = np.nan
    s = make_stack([a], ["x"])
    assert window_mean(s, (2, 2), 1, ["x"])[0] != window_mean(s, (2, 2), 1, ["x"])[0]  # NaN
    assert window_mean(s, (2, 2), 3, ["x"])[0] == np.mean([6, 7, 8, 11, 13, 16, 17, 18])
    assert window_mean(s, (0, 0), 3, ["x"])[0] == np.mean([0, 1, 5, 6])
    with pytest.raises(DomainError):
        window_mean(s, (0, 0), 4, ["x"])
    with pytest.raises(DomainError):
        window_mean(s, (5, 0), 3, ["x"])


def test_grid_path_equals_point_path(rng):
    data = rng.uniform(size=(2, 11, 9))
    data[rng.uniform(size=data.shape) < 0.2] = np.nan
    s = make_stack(list(data), ["a", "b"])
    for w in (1, 3, 5, 15):
        g = window_means_grid(s, w, ["a", "b"])
        rr, cc = np.meshgrid(np.arange(11), np.arange(9), indexing="ij")
        p = window_means(s, rr.ravel(), cc.ravel(), w, ["a", "b"])
        assert np.array_equal(g.reshape(2, -1).T, p, equal_nan=True)
        part = window_means_grid(s, w, ["a", "b"], 3, 7)
        assert np.array_equal(part, g[:, 3:7], equal_nan=True)


def _table(n=6, with_y=True):
    keys = pd.DataFrame({"Date": [dt.date(2018, 1, i + 1) for i in range(n)],
                         "Buoy": [f"CTD-{i + 1}" for i in range(n)]})
    X = np.arange(n * 3, dtype=float).reshape(n, 3) / 7.0
    return FeatureTable("x_1x1_depth_in_0_1", keys, ["b1", "b2", "ND:b1:b2"], X,
                        np.arange(n) / 3.0 if with_y else None, 2, ("b1", "b2"))


def test_feature_table_roundtrip(tmp_path):
    t = _table()
    write_feature_table(t, tmp_path / "t.csv")
    back = read_feature_table(tmp_path / "t.csv")
    assert back.dataset_id == t.dataset_id and back.n_dropped == 2
    assert back.raw_bands == t.raw_bands
    assert np.array_equal(back.X, t.X) and np.array_equal(back.y, t.y)
    assert back.keys["Buoy"].tolist() == t.keys["Buoy"].tolist()
    assert back.index_names == ["ND:b1:b2"]
    (tmp_path / "bad.csv").write_text("Foo,Bar\n1,2\n")
    with pytest.raises(SchemaError):
        read_feature_table(tmp_path / "bad.csv")


def test_feature_table_contract():
    t = _table()
    with pytest.raises(ContractError):
        t.columns(["b1", "zzz"])
    with pytest.raises(SchemaError):
        FeatureTable("x", t.keys, ["a", "a", "b"], t.X)


def test_screening_uses_train_rows_only(rng):
    n = 40
    keys = pd.DataFrame({"Date": range(n), "Buoy": ["CTD-1"] * n})
    X = rng.normal(size=(n, 5))
    y = X[:, 3] * 2.0
    X[:20, 4] = y[:20] * 5.0 + 0.0  # correlated only on the first half
    X[20:, 4] = rng.normal(size=20)
    t = FeatureTable("d", keys, ["r1", "ND:a:b", "ND:a:c", "ND:b:c", "ND:c:d"], X, y, 0, ("r1",))
    assert screen_features(t, np.arange(20), 1)[0] == "r1"
    assert screen_features(t, np.arange(20), 2) == ["r1", "ND:b:c", "ND:c:d"] or \
        set(screen_features(t, np.arange(20), 2)[1:]) == {"ND:b:c", "ND:c:d"}
    y2 = y.copy()
    y2[30:] = 1e6  # test rows change; screening on rows < 20 is unchanged
    t2 = FeatureTable("d", keys, t.feature_names, X, y2, 0, ("r1",))
    assert screen_features(t, np.arange(20), 3) == screen_features(t2, np.arange(20), 3)


def test_build_dataset_matches_buoys():
    rset = get_reflectance_set("C2X_rhown")
    t = GeoTransform(-0.867, 37.82, 0.001, -0.001, "EPSG:4326")
    data = np.full((6, 220, 200), 0.02)
    data[0] = 0.03
    s = make_stack(list(data), list(rset.band_names), t)
    d = dt.date(2018, 1, 1)
    buoys = pd.DataFrame({"Date": [d, d, dt.date(2019, 1, 1)], "Buoy": ["CTD-2", "CTD-1", "CTD-3"],
                          "DepthBin": ["0-1"] * 3, "Chl": [1.0, 2.0, 3.0]})
    ft = build_dataset(buoys, [(d, s)], rset, 3, "0-1")
    assert ft.keys["Buoy"].tolist() == ["CTD-1", "CTD-2"]
    assert ft.y.tolist() == [2.0, 1.0]
    assert ft.X.shape == (2, len(feature_names_for(rset)))
    assert ft.X[0, 0] == pytest.approx(0.03)
    assert ft.columns(["ND:rhown_B1:rhown_B2"])[0, 0] == pytest.approx(0.2)
    with pytest.raises(DomainError):
        build_dataset(buoys, [(d, s), (d, s)], rset, 3, "0-1")


def test_reflectance_set_catalog():
    assert len(REFLECTANCE_SETS) == 7
    assert len(FAMILIES) == 6


def test_counts_for_every_set_size():
    toa = get_reflectance_set("TOA")
    for n in range(2, 13):
        sub = subset_set(toa, toa.band_names[:n])
        for fam in FAMILIES:
            if fam in ("DallGitelson", "ThreeBandSum") and n < 3:
                with pytest.raises(DomainError):
                    enumerate_indices(fam, sub)
                continue
            assert len(enumerate_indices(fam, sub)) == closed_form(fam, n), (fam, n)
