"""Reflectance sets, spectral band-combination indices and feature tables.

Six index families are generated exhaustively over a reflectance set, with
band orderings fixed so that no two features are equal or exact negations of
each other:

==============  ===================================  ==========================
family          formula                              canonical ordering
==============  ===================================  ==========================
ND              (R1 - R2) / (R1 + R2)                l1 < l2
DallGitelson    (1/R1 - 1/R2) * R3                   l1 < l2, l3 not in {l1,l2}
ND4             (R1 - R2) / (R3 + R4)                l1 < l2, l3 <= l4,
                                                     (l3, l4) != (l1, l2)
InvDiff         1/R1 - 1/R2                          l1 < l2
RatioDiff       R1/R2 - R3/R4                        l1 != l2, l3 != l4,
                                                     (1,2) < (3,4) lexically
ThreeBandSum    (Ri + Rk) / (Ri + Rj)                li < lj < lk
==============  ===================================  ==========================

Canonical feature names are ``FAMILY:band:band[:band...]``, e.g.
``ND:rhow_B3:rhow_B4``; raw band columns use the stack band name.
"""

from __future__ import annotations

import csv
import datetime as dt
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ContractError, DomainError, SchemaError
from .ingest import STATION_REGISTRY, parse_date
from .raster import BandStack, lonlat_to_crs

log = logging.getLogger(__name__)

# central wavelengths in nm
BAND_WAVELENGTHS = {
    "B1": 443, "B2": 490, "B3": 560, "B4": 665, "B5": 705, "B6": 740,
    "B7": 783, "B8": 842, "B8A": 865, "B9": 940, "B10": 1375, "B11": 1610,
    "B12": 2190,
}

TOA_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B9", "B10", "B11", "B12")
RHOW_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A")
RHOWN_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6")

CANONICAL_STACK_BANDS = (
    tuple(f"TOA_{b}" for b in TOA_BANDS)
    + tuple(f"rhow_{b}" for b in RHOW_BANDS)
    + tuple(f"rhown_{b}" for b in RHOWN_BANDS)
    + ("c2rcc_flags",)
)

PROCESSORS = ("C2RCC", "C2X", "C2X-Complex")
WINDOW_SIZES = (1, 3, 5, 9, 15)

FAMILIES = ("ND", "DallGitelson", "ND4", "InvDiff", "RatioDiff", "ThreeBandSum")
FAMILY_ARITY = {"ND": 2, "DallGitelson": 3, "ND4": 4, "InvDiff": 2, "RatioDiff": 4, "ThreeBandSum": 3}
_MIN_BANDS = {"ND": 2, "DallGitelson": 3, "ND4": 2, "InvDiff": 2, "RatioDiff": 2, "ThreeBandSum": 3}

DENOMINATOR_EPS = 1e-12


@dataclass(frozen=True)
class ReflectanceSet:
    name: str
    kind: str  # "TOA", "rhow" or "rhown"
    processor: str | None  # None: taken from the configured TOA source
    band_names: tuple
    wavelengths: tuple


def _make_set(name, kind, processor, bands):
    return ReflectanceSet(
        name, kind, processor,
        tuple(f"{kind}_{b}" for b in bands),
        tuple(BAND_WAVELENGTHS[b] for b in bands),
    )


REFLECTANCE_SETS = {"TOA": _make_set("TOA", "TOA", None, TOA_BANDS)}
for _p in PROCESSORS:
    REFLECTANCE_SETS[f"{_p}_rhow"] = _make_set(f"{_p}_rhow", "rhow", _p, RHOW_BANDS)
    REFLECTANCE_SETS[f"{_p}_rhown"] = _make_set(f"{_p}_rhown", "rhown", _p, RHOWN_BANDS)


def get_reflectance_set(name: str) -> ReflectanceSet:
    try:
        return REFLECTANCE_SETS[name]
    except KeyError:
        raise DomainError(f"unknown reflectance set {name!r}; "
                          f"choose from {sorted(REFLECTANCE_SETS)}") from None


def subset_set(rset: ReflectanceSet, bands: Sequence[str]) -> ReflectanceSet:
    """A reflectance set restricted to some of its bands (order preserved)."""
    keep = [i for i, b in enumerate(rset.band_names) if b in set(bands)]
    return ReflectanceSet(rset.name, rset.kind, rset.processor,
                          tuple(rset.band_names[i] for i in keep),
                          tuple(rset.wavelengths[i] for i in keep))


def dataset_id(set_name: str, window: int, depth_bin: str) -> str:
    a, b = depth_bin.split("-")
    return f"{set_name}_{window}x{window}_depth_in_{a}_{b}"


def parse_dataset_id(ds_id: str):
    """Inverse of :func:`dataset_id`: (set name, window, depth bin)."""
    head, _, depth = ds_id.partition("_depth_in_")
    set_name, _, win = head.rpartition("_")
    w = int(win.split("x")[0])
    a, b = depth.split("_")
    return set_name, w, f"{a}-{b}"


# ---------------------------------------------------------------------------
# Index enumeration and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralIndex:
    family: str
    bands: tuple

    @property
    def canonical_name(self) -> str:
        return ":".join((self.family,) + tuple(self.bands))

    def __str__(self):
        return self.canonical_name


def parse_index_name(name: str) -> SpectralIndex | None:
    parts = name.split(":")
    if len(parts) < 3 or parts[0] not in FAMILY_ARITY:
        return None
    if len(parts) - 1 != FAMILY_ARITY[parts[0]]:
        return None
    return SpectralIndex(parts[0], tuple(parts[1:]))


def _ordered(rset: ReflectanceSet):
    order = sorted(range(len(rset.band_names)), key=lambda i: rset.wavelengths[i])
    return [rset.band_names[i] for i in order]


def enumerate_indices(family: str, rset: ReflectanceSet) -> list[SpectralIndex]:
    """All canonical indices of ``family`` over the bands of ``rset``."""
    if family not in FAMILY_ARITY:
        raise DomainError(f"unknown index family {family!r}")
    bands = _ordered(rset)
    n = len(bands)
    if n < _MIN_BANDS[family]:
        raise DomainError(f"{family} needs at least {_MIN_BANDS[family]} bands, set has {n}")
    pairs = list(itertools.combinations(range(n), 2))
    out = []
    if family in ("ND", "InvDiff"):
        out = [(i, j) for i, j in pairs]
    elif family == "DallGitelson":
        out = [(i, j, k) for i, j in pairs for k in range(n) if k != i and k != j]
    elif family == "ND4":
        denominators = [(k, m) for k in range(n) for m in range(k, n)]
        out = [(i, j, k, m) for i, j in pairs for k, m in denominators if (k, m) != (i, j)]
    elif family == "RatioDiff":
        ordered_pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        # a shared numerator gives R1 * (1/R2 - 1/R4), already a DallGitelson index
        out = [p + q for p, q in itertools.combinations(ordered_pairs, 2) if p[0] != q[0]]
    elif family == "ThreeBandSum":
        out = list(itertools.combinations(range(n), 3))
    return [SpectralIndex(family, tuple(bands[t] for t in combo)) for combo in out]


def all_indices(rset: ReflectanceSet) -> list[SpectralIndex]:
    """Every family that the set has enough bands for, in family order."""
    out = []
    for fam in FAMILIES:
        if len(rset.band_names) >= _MIN_BANDS[fam]:
            out.extend(enumerate_indices(fam, rset))
    return out


def _guard(den):
    return np.abs(den) < DENOMINATOR_EPS


def _family_values(family: str, cols: list[np.ndarray]) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if family == "ND":
            r1, r2 = cols
            den = r1 + r2
            v = (r1 - r2) / den
            bad = _guard(den)
        elif family == "InvDiff":
            r1, r2 = cols
            v = 1.0 / r1 - 1.0 / r2
            bad = (r1 <= 0) | (r2 <= 0) | _guard(r1) | _guard(r2)
        elif family == "DallGitelson":
            r1, r2, r3 = cols
            v = (1.0 / r1 - 1.0 / r2) * r3
            bad = (r1 <= 0) | (r2 <= 0) | _guard(r1) | _guard(r2)
        elif family == "ND4":
            r1, r2, r3, r4 = cols
            den = r3 + r4
            v = (r1 - r2) / den
            bad = _guard(den)
        elif family == "RatioDiff":
            r1, r2, r3, r4 = cols
            v = r1 / r2 - r3 / r4
            bad = _guard(r2) | _guard(r4)
        elif family == "ThreeBandSum":
            ri, rj, rk = cols
            den = ri + rj
            v = (ri + rk) / den
            bad = _guard(den)
        else:
            raise DomainError(f"unknown index family {family!r}")
    return np.where(bad, np.nan, v)


def eval_index(ix: SpectralIndex, reflectances: Mapping[str, float]) -> float:
    """Value of one index for a single named reflectance vector (NaN if guarded)."""
    cols = [np.asarray([float(reflectances[b])]) for b in ix.bands]
    return float(_family_values(ix.family, cols)[0])


def index_matrix(indices: Sequence[SpectralIndex], band_values: np.ndarray,
                 band_names: Sequence[str]) -> np.ndarray:
    """Evaluate many indices on a (rows x bands) matrix; returns rows x indices."""
    pos = {b: i for i, b in enumerate(band_names)}
    band_values = np.asarray(band_values, dtype=np.float64)
    out = np.empty((band_values.shape[0], len(indices)), dtype=np.float64)
    by_family: dict[str, list[int]] = {}
    for k, ix in enumerate(indices):
        by_family.setdefault(ix.family, []).append(k)
    for fam, ks in by_family.items():
        refs = np.array([[pos[b] for b in indices[k].bands] for k in ks])
        cols = [band_values[:, refs[:, a]] for a in range(refs.shape[1])]
        out[:, ks] = _family_values(fam, cols)
    return out


# ---------------------------------------------------------------------------
# Window aggregation
# ---------------------------------------------------------------------------

def _check_window(w: int):
    if w < 1 or w % 2 == 0:
        raise DomainError(f"window size must be a positive odd integer, got {w}")


def window_means(stack: BandStack, rows, cols, w: int, band_names: Sequence[str]) -> np.ndarray:
    """NaN-ignoring w x w means at many centers; returns (centers x bands).

    Windows are clipped at the raster border. A band whose window holds no
    valid pixel yields NaN.
    """
    _check_window(w)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if np.any((rows < 0) | (rows >= stack.height) | (cols < 0) | (cols >= stack.width)):
        raise DomainError("window center outside the raster")
    bidx = stack.band_indices(band_names)
    data = stack.data[bidx]
    h = w // 2
    total = np.zeros((len(bidx), rows.size), dtype=np.float64)
    count = np.zeros((len(bidx), rows.size), dtype=np.int64)
    for dr in range(-h, h + 1):
        rr = rows + dr
        for dc in range(-h, h + 1):
            cc = cols + dc
            inb = (rr >= 0) & (rr < stack.height) & (cc >= 0) & (cc < stack.width)
            v = data[:, np.clip(rr, 0, stack.height - 1), np.clip(cc, 0, stack.width - 1)].astype(np.float64)
            ok = inb[None, :] & ~np.isnan(v)
            total += np.where(ok, v, 0.0)
            count += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return means.T


def window_mean(stack: BandStack, center, w: int, bands) -> np.ndarray:
    """Per-band window mean at one (row, col) center."""
    names = bands.band_names if isinstance(bands, ReflectanceSet) else list(bands)
    r, c = center
    return window_means(stack, [r], [c], w, names)[0]


def window_means_grid(stack: BandStack, w: int, band_names: Sequence[str],
                      row_start: int = 0, row_stop: int | None = None) -> np.ndarray:
    """Window means for every pixel of rows [row_start, row_stop).

    Performs the same per-pixel additions in the same offset order as
    :func:`window_means`, so both paths agree bit for bit.
    Returns (bands, rows, width).
    """
    _check_window(w)
    row_stop = stack.height if row_stop is None else row_stop
    bidx = stack.band_indices(band_names)
    h = w // 2
    H, W = stack.height, stack.width
    lo, hi = max(row_start - h, 0), min(row_stop + h, H)
    slab = np.full((len(bidx), (row_stop - row_start) + 2 * h, W + 2 * h), np.nan)
    off = lo - (row_start - h)
    slab[:, off:off + (hi - lo), h:h + W] = stack.data[bidx, lo:hi, :]
    n = row_stop - row_start
    total = np.zeros((len(bidx), n, W), dtype=np.float64)
    count = np.zeros((len(bidx), n, W), dtype=np.int64)
    for dr in range(-h, h + 1):
        for dc in range(-h, h + 1):
            v = slab[:, h + dr:h + dr + n, h + dc:h + dc + W]
            ok = ~np.isnan(v)
            total += np.where(ok, v, 0.0)
            count += ok
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


# ---------------------------------------------------------------------------
# Feature tables
# ---------------------------------------------------------------------------

@dataclass
class FeatureTable:
    """Keyed feature matrix with an optional chlorophyll target.

    ``keys`` holds Date/Buoy (buoy datasets) or Row/Col (pixel tables).
    """

    dataset_id: str
    keys: pd.DataFrame
    feature_names: list
    X: np.ndarray
    y: np.ndarray | None = None
    n_dropped: int = 0
    raw_bands: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.keys), len(self.feature_names))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaError("duplicated feature column")
        if "Chl" in self.feature_names:
            raise SchemaError("target column must not be a feature")

    def __len__(self):
        return self.X.shape[0]

    @property
    def index_names(self) -> list:
        raw = set(self.raw_bands)
        return [f for f in self.feature_names if f not in raw]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        if list(names) == self.feature_names:
            return self.X
        pos = self.__dict__.get("_pos")
        if pos is None or len(pos) != len(self.feature_names):
            pos = self.__dict__["_pos"] = {f: i for i, f in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise ContractError(f"features missing from table {self.dataset_id}: {missing[:5]}")
        return self.X[:, [pos[n] for n in names]]

    def to_frame(self) -> pd.DataFrame:
        df = pd.concat([self.keys.reset_index(drop=True),
                        pd.DataFrame(self.X, columns=self.feature_names)], axis=1)
        if self.y is not None:
            df["Chl"] = self.y
        return df

    def subset(self, rows) -> "FeatureTable":
        rows = np.asarray(rows)
        return FeatureTable(self.dataset_id, self.keys.iloc[rows].reset_index(drop=True),
                            list(self.feature_names), self.X[rows],
                            None if self.y is None else self.y[rows],
                            self.n_dropped, self.raw_bands, dict(self.meta))


def write_feature_table(table: FeatureTable, path) -> None:
    """CSV with a ``# dataset_id=`` comment line; floats round-trip exactly."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# dataset_id={table.dataset_id}\n")
        fh.write(f"# n_dropped={table.n_dropped}\n")
        fh.write(f"# raw_bands={'|'.join(table.raw_bands)}\n")
        w = csv.writer(fh, lineterminator="\n")
        key_cols = list(table.keys.columns)
        header = key_cols + list(table.feature_names) + (["Chl"] if table.y is not None else [])
        w.writerow(header)
        keys = table.keys.to_numpy(dtype=object)
        for i in range(len(table)):
            k = [v.isoformat() if isinstance(v, dt.date) else str(v) for v in keys[i]]
            row = table.X[i].tolist()
            if table.y is not None:
                row.append(float(table.y[i]))
            # list repr formats each float with repr(); drop brackets and spaces
            fh.write(",".join(k) + "," + str(row)[1:-1].replace(" ", "") + "\n")


def read_feature_table(path) -> FeatureTable:
    path = Path(path)
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    n_comment = 0
    while n_comment < len(lines) and lines[n_comment].startswith("#"):
        k, _, v = lines[n_comment][1:].strip().partition("=")
        meta[k.strip()] = v
        n_comment += 1
    rows = list(csv.reader(lines[n_comment:]))
    if not rows:
        raise SchemaError(f"{path}: no header row")
    header, body = rows[0], [r for r in rows[1:] if r]
    key_cols = ["Date", "Buoy"] if "Date" in header else ["Row", "Col"]
    if header[:2] != key_cols:
        raise SchemaError(f"{path}: expected key columns {key_cols}")
    has_y = header[-1] == "Chl"
    feats = header[2:-1] if has_y else header[2:]
    # Python's float() is correctly rounded, so repr-written values round-trip
    values = np.array([r[2:] for r in body], dtype=np.float64).reshape(len(body), len(header) - 2)
    if key_cols[0] == "Date":
        keys = pd.DataFrame({"Date": [parse_date(r[0]) for r in body], "Buoy": [r[1] for r in body]})
    else:
        keys = pd.DataFrame({"Row": np.array([int(r[0]) for r in body], dtype=np.int64),
                             "Col": np.array([int(r[1]) for r in body], dtype=np.int64)})
    y = values[:, -1].copy() if has_y else None
    X = values[:, :-1] if has_y else values
    raw = tuple(b for b in meta.get("raw_bands", "").split("|") if b)
    return FeatureTable(meta.get("dataset_id", path.stem), keys, feats, np.ascontiguousarray(X),
                        y, int(meta.get("n_dropped", 0)), raw)


def feature_names_for(rset: ReflectanceSet) -> list[str]:
    return list(rset.band_names) + [ix.canonical_name for ix in all_indices(rset)]


def features_from_means(means: np.ndarray, rset: ReflectanceSet,
                        indices: Sequence[SpectralIndex] | None = None) -> np.ndarray:
    """Raw band means followed by index values, in canonical column order."""
    indices = all_indices(rset) if indices is None else indices
    return np.hstack([means, index_matrix(indices, means, rset.band_names)])


def buoy_pixel(stack: BandStack, buoy_id: str):
    lat, lon = STATION_REGISTRY[buoy_id]
    x, y = lonlat_to_crs(lon, lat, stack.transform.crs_id)
    return stack.transform.geo_to_pixel(x, y)


def _buoy_order(b: str) -> int:
    return int(b.split("-")[1])


def build_dataset(buoys: pd.DataFrame, scenes, rset: ReflectanceSet, w: int,
                  depth_bin: str) -> FeatureTable:
    """Exact-date matches of buoy chlorophyll and windowed reflectance features.

    ``scenes`` is an iterable of ``(date, BandStack)``; at most one stack per
    date. Rows with any NaN feature or target are dropped and counted.
    """
    scene_by_date: dict = {}
    for d, stack in scenes:
        d = parse_date(d)
        if d in scene_by_date:
            raise DomainError(f"two scenes for {d}")
        scene_by_date[d] = stack
    sub = buoys[buoys["DepthBin"] == depth_bin] if "DepthBin" in buoys.columns else buoys
    indices = all_indices(rset)
    names = list(rset.band_names) + [ix.canonical_name for ix in indices]

    keys, rows_x, ys = [], [], []
    outside = 0
    by_date: dict = {}
    for d, buoy, chl in sub[["Date", "Buoy", "Chl"]].itertuples(index=False):
        d = parse_date(d)
        if d in scene_by_date:
            by_date.setdefault(d, []).append((buoy, float(chl)))
    for d in sorted(by_date):
        stack = scene_by_date[d]
        pts = []
        for buoy, chl in by_date[d]:
            r, c = buoy_pixel(stack, buoy)
            if 0 <= r < stack.height and 0 <= c < stack.width:
                pts.append((buoy, chl, r, c))
            else:
                outside += 1
        if not pts:
            continue
        means = window_means(stack, [p[2] for p in pts], [p[3] for p in pts], w, rset.band_names)
        feats = features_from_means(means, rset, indices)
        for p, f in zip(pts, feats):
            keys.append((d, p[0]))
            rows_x.append(f)
            ys.append(p[1])
    if outside:
        log.warning("%d buoy rows fall outside the scene grid", outside)

    X = np.array(rows_x, dtype=np.float64).reshape(len(rows_x), len(names))
    y = np.array(ys, dtype=np.float64)
    ok = np.isfinite(X).all(axis=1) & np.isfinite(y)
    dropped = int((~ok).sum()) + outside
    order = sorted((i for i in range(len(keys)) if ok[i]),
                   key=lambda i: (keys[i][0], _buoy_order(keys[i][1])))
    key_df = pd.DataFrame([keys[i] for i in order], columns=["Date", "Buoy"])
    table = FeatureTable(dataset_id(rset.name, w, depth_bin), key_df, names,
                         X[order] if order else np.empty((0, len(names))),
                         y[order] if order else np.empty(0),
                         dropped, tuple(rset.band_names))
    if len(table) == 0:
        log.warning("dataset %s is empty: no buoy date matches a scene", table.dataset_id)
    return table


def _abs_pearson(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    num = yc @ xc
    den = np.sqrt((xc * xc).sum(axis=0) * float(yc @ yc))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, np.abs(num) / den, 0.0)
    return np.where(np.isfinite(r), r, 0.0)


def screen_features(table: FeatureTable, train_rows, top_k: int) -> list[str]:
    """Raw bands plus the ``top_k`` index columns most correlated with Chl.

    Correlations use only ``train_rows``; ties resolve by canonical name.
    Results are memoised on the table per (rows, top_k).
    """
    if table.y is None:
        raise ContractError("feature screening needs a target column")
    train_rows = np.asarray(train_rows, dtype=np.int64)
    key = (train_rows.tobytes(), int(top_k))
    cache = table.__dict__.setdefault("_screen_cache", {})
    if key in cache:
        return list(cache[key])
    raw_set = set(table.raw_bands)
    raw = [f for f in table.feature_names if f in raw_set]
    idx_pos = np.array([i for i, f in enumerate(table.feature_names) if f not in raw_set], dtype=np.int64)
    if top_k <= 0 or idx_pos.size == 0:
        return raw
    idx_names = np.array([table.feature_names[i] for i in idx_pos])
    score = _abs_pearson(table.X[np.ix_(train_rows, idx_pos)], table.y[train_rows])
    ranked = np.lexsort((idx_names, -score))
    out = raw + [str(n) for n in idx_names[ranked[:top_k]]]
    cache[key] = tuple(out)
    return out
