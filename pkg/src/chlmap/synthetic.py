"""Synthetic scenes, buoy CSVs and a config with a known chlorophyll relation.

Every buoy sits in a 3x3 patch of constant reflectance. Its chlorophyll per
depth bin is a linear function of one normalized difference of the patch
values plus Gaussian noise, so the generator itself is the ground truth:

* 0-1 m: ``120 * ND(rhow_B3, rhow_B4) + 2``
* 1-2 m: ``100 * ND(rhow_B2, rhow_B5) + 3``
* 2-3 m: ``80 * ND(TOA_B3, TOA_B8) + 4``
* 3-4 m: ``60 * ND(rhow_B4, rhow_B6) + 2.5``

Processors differ only by a per-processor scale on the water reflectances,
which leaves every normalized difference unchanged.
"""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path

import numpy as np

from .features import CANONICAL_STACK_BANDS, PROCESSORS
from .ingest import SCHEMA_DEPTHS, STATION_REGISTRY, SceneCatalogEntry, depth_bin_of, save_scene_catalog
from .raster import GeoTransform, geo_to_pixel, stack_from_arrays, write_band_stack

BBOX = {"north": 37.82, "west": -0.867, "south": 37.62, "east": -0.7}
SIZE = 64
NOISE_SD = 0.1

# depth bin -> (numerator band, denominator band, slope, offset)
RELATIONS = {
    "0-1": ("rhow_B3", "rhow_B4", 120.0, 2.0),
    "1-2": ("rhow_B2", "rhow_B5", 100.0, 3.0),
    "2-3": ("TOA_B3", "TOA_B8", 80.0, 4.0),
    "3-4": ("rhow_B4", "rhow_B6", 60.0, 2.5),
}
_PROC_SCALE = {"C2RCC": 1.1, "C2X": 0.95, "C2X-Complex": 1.0}


def synthetic_transform(size: int = SIZE) -> GeoTransform:
    return GeoTransform(BBOX["west"], BBOX["north"], (BBOX["east"] - BBOX["west"]) / size,
                        -(BBOX["north"] - BBOX["south"]) / size, "EPSG:4326")


def buoy_pixels(t: GeoTransform) -> dict:
    return {b: geo_to_pixel(t, lon, lat) for b, (lat, lon) in STATION_REGISTRY.items()}


def nd(a, b) -> float:
    a, b = float(a), float(b)
    return (a - b) / (a + b)


def _patch_values(rng, names):
    """Per-buoy band values; each relation pair gets a controlled ND in [-0.01, 0.1]."""
    vals = {n: (rng.uniform(0.05, 0.15) if n.startswith("TOA") else rng.uniform(0.01, 0.06))
            for n in names if n != "c2rcc_flags"}
    for num, den, _, _ in RELATIONS.values():
        t = rng.uniform(-0.01, 0.1)
        vals[den] = vals[num] * (1 - t) / (1 + t)
    return vals


def make_scene_stacks(date_index: int, rng, processors, size: int = SIZE):
    """(stacks per processor, chl per buoy per depth bin) for one date."""
    t = synthetic_transform(size)
    names = list(CANONICAL_STACK_BANDS)
    base = np.empty((len(names), size, size), dtype=np.float64)
    for i, n in enumerate(names):
        if n == "c2rcc_flags":
            base[i] = 0.0
            continue
        level = rng.uniform(0.05, 0.15) if n.startswith("TOA") else rng.uniform(0.01, 0.06)
        base[i] = level + rng.normal(0.0, 0.002, size=(size, size))
    base[:, :4, :4] = np.nan  # a little land
    chl = {}
    patches = {}
    for buoy, (r, c) in buoy_pixels(t).items():
        patches[buoy] = (r, c, _patch_values(rng, names))
    stacks = {}
    for proc in processors:
        data = base.copy()
        for i, n in enumerate(names):
            if n.startswith(("rhow", "rhown")):
                data[i] *= _PROC_SCALE[proc]
        for buoy, (r, c, vals) in patches.items():
            for i, n in enumerate(names):
                if n in vals:
                    v = vals[n] * (_PROC_SCALE[proc] if n.startswith(("rhow", "rhown")) else 1.0)
                    data[i, max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = v
        stacks[proc] = stack_from_arrays(list(data), names, t)
    # targets come from the stored float32 values of the reference processor
    ref = stacks["C2X-Complex" if "C2X-Complex" in stacks else processors[0]]
    for buoy, (r, c, _) in patches.items():
        chl[buoy] = {}
        for depth, (num, den, slope, off) in RELATIONS.items():
            v = slope * nd(ref.band(num)[r, c], ref.band(den)[r, c]) + off + rng.normal(0.0, NOISE_SD)
            chl[buoy][depth] = max(v, 0.0)
    return stacks, chl


def _write_buoy_csv(path, schema, rows):
    depths = SCHEMA_DEPTHS[schema]
    with open(path, "w") as fh:
        fh.write(",".join(["Date", "Buoy", *[f"{d:g}" for d in depths]]) + "\n")
        for date, buoy, chl in rows:
            cells = []
            for d in depths:
                b = depth_bin_of(d)
                cells.append(repr(chl[b]) if b is not None else repr(chl["3-4"]))
            fh.write(",".join([date.isoformat(), buoy, *cells]) + "\n")


def make_synthetic_project(root, n_dates: int = 30, processors=PROCESSORS, seed: int = 0,
                           config_overrides: dict | None = None, start=dt.date(2018, 1, 3),
                           cloudy_extra: bool = True) -> Path:
    """Write scenes, buoy CSVs, catalog, mask and ``config.json`` under ``root``.

    Returns the config path. Odd-numbered dates appear in both buoy sources
    with identical values; ``cloudy_extra`` adds one scene the cloud screen
    must reject.
    """
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    processors = list(processors)
    catalog, upct, imida = [], [], []
    dates = [start + dt.timedelta(days=5 * i) for i in range(n_dates)]
    for i, date in enumerate(dates):
        stacks, chl = make_scene_stacks(i, rng, processors)
        for proc, stack in stacks.items():
            rel = f"scenes/{proc}_{date.isoformat()}.bsf"
            write_band_stack(stack, root / rel)
            catalog.append(SceneCatalogEntry(date, "30SXG", rel, float(rng.uniform(0, 10)),
                                             (root / rel).stat().st_size, proc))
        for buoy in sorted(chl, key=lambda b: int(b.split("-")[1])):
            upct.append((date, buoy, chl[buoy]))
            if i % 2 == 1:
                imida.append((date, buoy, chl[buoy]))
    if cloudy_extra:
        date = dates[-1] + dt.timedelta(days=5)
        stacks, _ = make_scene_stacks(n_dates, rng, processors[:1])
        rel = f"scenes/{processors[0]}_{date.isoformat()}.bsf"
        write_band_stack(stacks[processors[0]], root / rel)
        catalog.append(SceneCatalogEntry(date, "30SXG", rel, 85.0, (root / rel).stat().st_size,
                                         processors[0]))
    _write_buoy_csv(root / "upct.csv", "UPCT", upct)
    _write_buoy_csv(root / "imida.csv", "IMIDA", imida)
    # catalog paths stay relative to the catalog file
    save_scene_catalog(catalog, root / "catalog.json")
    t = synthetic_transform()
    inset_x, inset_y = 2 * t.pixel_width, -2 * t.pixel_height
    ring = [[BBOX["west"] + inset_x, BBOX["north"] - inset_y], [BBOX["east"] - inset_x, BBOX["north"] - inset_y],
            [BBOX["east"] - inset_x, BBOX["south"] + inset_y], [BBOX["west"] + inset_x, BBOX["south"] + inset_y],
            [BBOX["west"] + inset_x, BBOX["north"] - inset_y]]
    (root / "mask.geojson").write_text(json.dumps(
        {"type": "Feature", "properties": {}, "geometry": {"type": "Polygon", "coordinates": [ring]}}))
    cfg = {
        "schema_version": 1,
        "paths": {"scene_catalog": "catalog.json", "upct_csvs": ["upct.csv"],
                  "imida_csvs": ["imida.csv"], "output_dir": "out", "mask_geojson": "mask.geojson"},
        "bbox": dict(BBOX),
        "final_models": "auto",
    }
    for k, v in (config_overrides or {}).items():
        cfg[k] = v
    path = root / "config.json"
    path.write_text(json.dumps(cfg, indent=1))
    return path
