"""Buoy ground truth and scene catalog handling.

Buoy CSVs come in two wide layouts, one row per sampling date and one column
per sensor depth:

* ``UPCT``: depth columns at 0.5 m steps from 0.5 to 5.0 m.
* ``IMIDA``: depth columns at 0, 1, 2, 3, 4 and 5 m.

Depth column headers may carry decoration (``"1.5"``, ``"chl_1.5m"``,
``"depth_2"``); the first number in the header is the depth. The date column
is ``Date`` (case-insensitive). The buoy comes from a ``Buoy`` column when
present, otherwise from the file name (``CTD-3.csv``, ``ctd3_upct.csv``).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ParseError, SchemaError

log = logging.getLogger(__name__)

# (latitude, longitude), WGS84
STATION_REGISTRY = {
    "CTD-1": (37.811800, -0.784483),
    "CTD-2": (37.760617, -0.807800),
    "CTD-3": (37.761783, -0.783550),
    "CTD-4": (37.748233, -0.749617),
    "CTD-5": (37.740450, -0.727117),
    "CTD-6": (37.710417, -0.773833),
    "CTD-7": (37.718000, -0.839783),
    "CTD-8": (37.694517, -0.810400),
    "CTD-9": (37.666817, -0.809683),
    "CTD-10": (37.659833, -0.781967),
    "CTD-11": (37.651800, -0.728883),
    "CTD-12": (37.687350, -0.783783),
}

SCHEMA_DEPTHS = {
    "UPCT": tuple(round(0.5 * i, 1) for i in range(1, 11)),
    "IMIDA": (0.0, 1.0, 2.0, 3.0, 4.0, 5.0),
}

DEPTH_BINS = ("0-1", "1-2", "2-3", "3-4")

DEPTH_TABLE_COLUMNS = ["Date", "Buoy", "DepthBin", "Chl"]


@dataclass(frozen=True)
class BuoyRecord:
    source: str
    buoy_id: str
    date: dt.date
    depth: float
    chl: float


@dataclass
class SceneCatalogEntry:
    date: dt.date
    tile_id: str
    path: str
    cloud_pct: float
    file_bytes: int = 0
    processor: str = "C2RCC"
    valid_pixel_fraction: float | None = None

    def __post_init__(self):
        if isinstance(self.date, str):
            self.date = parse_date(self.date)
        if not 0.0 <= float(self.cloud_pct) <= 100.0:
            raise ValueError(f"cloud_pct {self.cloud_pct} outside [0, 100]")

    def to_dict(self):
        d = asdict(self)
        d["date"] = self.date.isoformat()
        return d


def parse_date(text) -> dt.date:
    """ISO date, optionally followed by a time part which is discarded."""
    if isinstance(text, dt.datetime):
        return text.date()
    if isinstance(text, dt.date):
        return text
    s = str(text).strip()
    try:
        if len(s) > 10 and s[10] in "T ":
            return dt.datetime.fromisoformat(s).date()
        return dt.date.fromisoformat(s)
    except ValueError:
        raise ParseError(f"unparseable date {text!r}") from None


def normalize_buoy_id(name: str) -> str:
    """Map source-specific station names (``ctd3``, ``CTD_03``) to ``CTD-3``."""
    m = re.search(r"ctd[\s_\-]*0*(\d+)", str(name), flags=re.IGNORECASE)
    if m is None:
        m = re.fullmatch(r"\s*0*(\d+)\s*", str(name))
    if m is None:
        raise SchemaError(f"cannot derive a buoy id from {name!r}")
    bid = f"CTD-{int(m.group(1))}"
    if bid not in STATION_REGISTRY:
        raise SchemaError(f"buoy {bid} is not in the station registry")
    return bid


def _depth_from_header(header: str):
    m = re.search(r"\d+(?:\.\d+)?", header)
    return float(m.group(0)) if m else None


def load_buoy_source(path, schema: str) -> list[BuoyRecord]:
    """One record per non-empty depth cell of a wide buoy CSV."""
    schema = schema.upper()
    if schema not in SCHEMA_DEPTHS:
        raise SchemaError(f"unknown buoy schema {schema!r}")
    allowed = SCHEMA_DEPTHS[schema]
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    date_col = buoy_col = None
    depth_cols = {}
    for i, h in enumerate(header):
        key = h.lower()
        if key in ("date", "fecha", "time", "datetime"):
            date_col = i
        elif key in ("buoy", "boya", "station"):
            buoy_col = i
        else:
            depth = _depth_from_header(h)
            if depth is None or not any(abs(depth - a) < 1e-9 for a in allowed):
                raise SchemaError(f"{path.name}: column {h!r} is not a {schema} depth column")
            depth_cols[i] = depth
    if date_col is None:
        raise SchemaError(f"{path.name}: no date column")
    file_buoy = None if buoy_col is not None else normalize_buoy_id(path.stem)

    records = []
    skipped = 0
    for row in rows[1:]:
        if not row or all(not c.strip() for c in row):
            continue
        date = parse_date(row[date_col])
        buoy = normalize_buoy_id(row[buoy_col]) if buoy_col is not None else file_buoy
        for i, depth in depth_cols.items():
            cell = row[i].strip() if i < len(row) else ""
            if cell == "" or cell.lower() in ("nan", "na", "null"):
                continue
            try:
                chl = float(cell)
            except ValueError:
                raise ParseError(f"{path.name}: bad chlorophyll value {cell!r}") from None
            if not math.isfinite(chl) or chl < 0:
                skipped += 1
                continue
            records.append(BuoyRecord(schema, buoy, date, depth, chl))
    if skipped:
        log.warning("%s: dropped %d negative or non-finite values", path.name, skipped)
    return records


def depth_bin_of(depth: float) -> str | None:
    """Half-open 1 m bins; 4.0 m closes the last bin; deeper values are dropped."""
    if depth < 0 or depth > 4.0:
        return None
    if depth == 4.0:
        return DEPTH_BINS[-1]
    return DEPTH_BINS[int(math.floor(depth))]


def empty_depth_table() -> pd.DataFrame:
    return pd.DataFrame({
        "Date": pd.Series(dtype=object),
        "Buoy": pd.Series(dtype=object),
        "DepthBin": pd.Series(dtype=object),
        "Chl": pd.Series(dtype=float),
    })


def _sorted_table(df: pd.DataFrame) -> pd.DataFrame:
    order = sorted(range(len(df)), key=lambda i: (
        df["Date"].iat[i], df["DepthBin"].iat[i], int(df["Buoy"].iat[i].split("-")[1])))
    return df.iloc[order].reset_index(drop=True)


def bin_depths(records: list[BuoyRecord]) -> pd.DataFrame:
    """Average single-source records into (date, buoy, depth bin) cells."""
    sources = {r.source for r in records}
    if len(sources) > 1:
        raise ValueError(f"bin_depths expects one source, got {sorted(sources)}")
    groups: dict[tuple, list[float]] = {}
    for r in records:
        b = depth_bin_of(r.depth)
        if b is None:
            continue
        groups.setdefault((r.date, r.buoy_id, b), []).append(r.chl)
    if not groups:
        return empty_depth_table()
    rows = [
        {"Date": d, "Buoy": buoy, "DepthBin": b, "Chl": float(np.mean(vals))}
        for (d, buoy, b), vals in groups.items()
    ]
    return _sorted_table(pd.DataFrame(rows, columns=DEPTH_TABLE_COLUMNS))


def merge_sources(a: pd.DataFrame, b: pd.DataFrame) -> pd.DataFrame:
    """Union of two depth tables; cells present in both take the mean."""
    cells: dict[tuple, list[float]] = {}
    for df in (a, b):
        for d, buoy, bin_, chl in df[DEPTH_TABLE_COLUMNS].itertuples(index=False):
            cells.setdefault((d, buoy, bin_), []).append(float(chl))
    if not cells:
        return empty_depth_table()
    rows = []
    for (d, buoy, bin_), vals in cells.items():
        chl = vals[0] if len(vals) == 1 else (vals[0] + vals[1]) / 2.0
        rows.append({"Date": d, "Buoy": buoy, "DepthBin": bin_, "Chl": chl})
    return _sorted_table(pd.DataFrame(rows, columns=DEPTH_TABLE_COLUMNS))


def write_depth_tables(table: pd.DataFrame, out_dir) -> dict[str, Path]:
    """One ``Date,Buoy,Chl`` CSV per depth bin; returns bin -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for b in DEPTH_BINS:
        sub = table[table["DepthBin"] == b]
        p = out_dir / f"chl_depth_{b}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Date", "Buoy", "Chl"])
            for d, buoy, chl in sub[["Date", "Buoy", "Chl"]].itertuples(index=False):
                w.writerow([d.isoformat(), buoy, repr(float(chl))])
        paths[b] = p
    return paths


def read_depth_table(path, depth_bin: str) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"Date": str, "Buoy": str}, float_precision="round_trip")
    if list(df.columns) != ["Date", "Buoy", "Chl"]:
        raise SchemaError(f"{path}: expected columns Date,Buoy,Chl")
    df["Date"] = [parse_date(d) for d in df["Date"]]
    df.insert(2, "DepthBin", depth_bin)
    return df


# ---------------------------------------------------------------------------
# Scene catalog
# ---------------------------------------------------------------------------

def load_scene_catalog(path) -> list[SceneCatalogEntry]:
    """Read a JSON array of catalog entries; relative paths resolve next to it."""
    path = Path(path)
    with open(path) as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise SchemaError(f"{path}: scene catalog must be a JSON array")
    entries = []
    for item in items:
        item = dict(item)
        p = Path(item["path"])
        if not p.is_absolute():
            item["path"] = str((path.parent / p).resolve())
        entries.append(SceneCatalogEntry(**item))
    return entries


def save_scene_catalog(entries, path) -> None:
    with open(path, "w") as fh:
        json.dump([e.to_dict() for e in entries], fh, indent=1)


def valid_pixel_fraction(stack, bbox=None, band: str = "TOA_B3") -> float:
    """Fraction of non-NaN, non-zero pixels of ``band`` inside the study box."""
    from .raster import crop_geo

    if bbox is not None:
        stack = crop_geo(stack, bbox["north"], bbox["west"], bbox["south"], bbox["east"])
    values = stack.band(band)
    ok = np.isfinite(values) & (values != 0)
    return float(ok.sum()) / values.size


def with_valid_fraction(entry: SceneCatalogEntry, fraction: float) -> SceneCatalogEntry:
    return replace(entry, valid_pixel_fraction=float(fraction))


def read_exclusion_list(path) -> set[dt.date]:
    """Dates to drop after manual screening, one per line, ``#`` comments."""
    out = set()
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.add(parse_date(line))
    return out


def filter_scenes(catalog, max_cloud_pct: float, min_valid_fraction: float,
                  exclude_dates=()) -> list[SceneCatalogEntry]:
    """Keep scenes under the cloud threshold and above the valid fraction."""
    kept = []
    excluded = set(exclude_dates)
    for e in catalog:
        if e.valid_pixel_fraction is None:
            raise ValueError(f"scene {e.path} has no valid_pixel_fraction")
        if e.date in excluded:
            continue
        if e.cloud_pct <= max_cloud_pct and e.valid_pixel_fraction >= min_valid_fraction:
            kept.append(e)
    kept.sort(key=lambda e: (e.date, e.processor, e.path))
    return kept
