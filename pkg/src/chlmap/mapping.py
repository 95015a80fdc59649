"""Per-pixel inference over a masked grid, map output and PNG rendering."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, ContractError
from .features import (FeatureTable, ReflectanceSet, index_matrix, parse_index_name,
                       window_means_grid)
from .raster import BandStack, GeoTransform, stack_from_arrays, write_band_stack, write_geotiff

log = logging.getLogger(__name__)

DEFAULT_CHUNK_ROWS = 32

# (position in [0, 1], RGB); low values dark blue through green to red
DEFAULT_PALETTE = (
    (0.0, (8, 29, 88)),
    (0.2, (34, 94, 168)),
    (0.4, (29, 145, 192)),
    (0.6, (127, 205, 187)),
    (0.8, (237, 248, 177)),
    (1.0, (215, 48, 31)),
)
DEFAULT_GAMMA = 0.5


def _resolve_features(feature_names, rset: ReflectanceSet):
    """Split model feature names into raw bands and index definitions."""
    bands = set(rset.band_names)
    raw_pos, indices, idx_pos = [], [], []
    for k, name in enumerate(feature_names):
        if name in bands:
            raw_pos.append((k, rset.band_names.index(name)))
            continue
        ix = parse_index_name(name)
        if ix is None or not set(ix.bands) <= bands:
            raise ContractError(f"feature {name!r} cannot be generated from set {rset.name}")
        indices.append(ix)
        idx_pos.append(k)
    return raw_pos, indices, idx_pos


def extract_all_pixels(stack: BandStack, mask: np.ndarray, rset: ReflectanceSet, w: int,
                       feature_names=None, chunk_rows: int = DEFAULT_CHUNK_ROWS,
                       n_jobs: int = 1) -> FeatureTable:
    """One feature row per true mask pixel, in row-major pixel order.

    Uses the same window means and index formulas as the buoy datasets.
    ``feature_names`` (usually a trained model's) picks and orders the
    columns; any name the set cannot produce raises before extraction.
    Row chunks are independent, so ``chunk_rows`` and ``n_jobs`` never
    change the values.
    """
    from .features import feature_names_for

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (stack.height, stack.width):
        raise ContractError(f"mask shape {mask.shape} does not match the stack grid")
    names = feature_names_for(rset) if feature_names is None else list(feature_names)
    raw_pos, indices, idx_pos = _resolve_features(names, rset)
    rows_all, cols_all = np.nonzero(mask)
    X = np.empty((rows_all.size, len(names)), dtype=np.float64)
    starts = list(range(0, stack.height, max(1, int(chunk_rows))))
    counts = [int(mask[r0:r0 + chunk_rows].sum()) for r0 in starts]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)

    def fill(i):
        r0 = starts[i]
        if counts[i] == 0:
            return
        r1 = min(r0 + chunk_rows, stack.height)
        grid = window_means_grid(stack, w, rset.band_names, r0, r1)
        means = grid[:, mask[r0:r1]].T  # (pixels, bands), row-major like np.nonzero
        block = np.empty((counts[i], len(names)))
        for k, b in raw_pos:
            block[:, k] = means[:, b]
        if indices:
            block[:, idx_pos] = index_matrix(indices, means, rset.band_names)
        X[offsets[i]:offsets[i + 1]] = block

    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(n_jobs) as ex:
            list(ex.map(fill, range(len(starts))))
    else:
        for i in range(len(starts)):
            fill(i)
    keys = pd.DataFrame({"Row": rows_all.astype(np.int64), "Col": cols_all.astype(np.int64)})
    raw = tuple(n for n in names if n in set(rset.band_names))
    return FeatureTable(f"{rset.name}_{w}x{w}_pixels", keys, names, X, None, 0, raw)


@dataclass
class ChlMap:
    # float64 mg/m3, NaN outside mask or where features are invalid; file
    # rasters are float32, the predictions CSV keeps full precision
    grid: np.ndarray
    transform: GeoTransform
    depth_bin: str
    provenance: dict = field(default_factory=dict)

    def to_stack(self) -> BandStack:
        return stack_from_arrays([self.grid], [f"chl_{self.depth_bin}"], self.transform)


def predict_map(model, table: FeatureTable, template: BandStack, depth_bin: str = "",
                chunk_size: int = 4096, provenance=None) -> ChlMap:
    """Place ``model.predict`` of each pixel row at its (row, col).

    Rows with any non-finite feature stay NaN. Negative predictions are
    clamped to zero; how many is recorded in the provenance.
    """
    grid = np.full((template.height, template.width), np.nan, dtype=np.float64)
    X = table.columns(model.feature_names)
    ok = np.isfinite(X).all(axis=1)
    pred = np.empty(int(ok.sum()))
    Xo = X[ok]
    for s in range(0, Xo.shape[0], chunk_size):
        pred[s:s + chunk_size] = model.predict(Xo[s:s + chunk_size], model.feature_names)
    neg = pred < 0
    n_clamped = int(neg.sum())
    pred[neg] = 0.0
    rows = table.keys["Row"].to_numpy()[ok]
    cols = table.keys["Col"].to_numpy()[ok]
    grid[rows, cols] = pred
    prov = dict(provenance or {})
    prov.update({"depth_bin": depth_bin, "n_pixels": int(len(table)), "n_predicted": int(ok.sum()),
                 "n_invalid_features": int((~ok).sum()), "n_clamped_negative": n_clamped})
    if n_clamped:
        log.info("clamped %d negative predictions to 0 for depth %s", n_clamped, depth_bin)
    return ChlMap(grid, template.transform, depth_bin, prov)


def write_predictions_csv(chl: ChlMap, path) -> None:
    """Row, Col, Chl for every predicted pixel; values round-trip exactly."""
    rows, cols = np.nonzero(np.isfinite(chl.grid))
    with open(path, "w") as fh:
        fh.write("Row,Col,Chl\n")
        for r, c in zip(rows.tolist(), cols.tolist()):
            fh.write(f"{r},{c},{float(chl.grid[r, c])!r}\n")


def read_predictions_csv(path, shape) -> np.ndarray:
    df = pd.read_csv(path, float_precision="round_trip")
    grid = np.full(shape, np.nan)
    grid[df["Row"].to_numpy(), df["Col"].to_numpy()] = df["Chl"].to_numpy(dtype=np.float64)
    return grid


def write_chl_map(chl: ChlMap, out_dir, stem: str) -> dict:
    """BSF, GeoTIFF, predictions CSV and provenance JSON; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = chl.to_stack()
    paths = {"bsf": out_dir / f"{stem}.bsf", "tif": out_dir / f"{stem}.tif",
             "csv": out_dir / f"{stem}.csv", "provenance": out_dir / f"{stem}.json"}
    write_band_stack(stack, paths["bsf"])
    write_predictions_csv(chl, paths["csv"])
    write_geotiff(stack, paths["tif"])
    prov = dict(chl.provenance)
    prov["grid_sha256"] = hashlib.sha256(np.ascontiguousarray(chl.grid).tobytes()).hexdigest()
    paths["provenance"].write_text(json.dumps(prov, sort_keys=True, indent=1))
    return paths


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def check_palette(palette):
    pos = [float(p[0]) for p in palette]
    if len(pos) < 2 or any(b <= a for a, b in zip(pos, pos[1:])):
        raise ConfigError("palette control points must be strictly increasing")
    return np.array(pos), np.array([p[1] for p in palette], dtype=np.float64)


def scale_max(grid: np.ndarray, percentile: float = 99.0) -> float:
    v = grid[np.isfinite(grid)]
    return float(np.percentile(v, percentile)) if v.size else 0.0


def palette_positions(grid, vmax: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """``(chl / vmax) ** gamma`` clipped to [0, 1]; NaN stays NaN."""
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    if vmax <= 0:
        return np.where(np.isnan(grid), np.nan, 0.0)
    with np.errstate(invalid="ignore"):
        return np.clip(np.clip(grid, 0.0, None) / vmax, 0.0, 1.0) ** gamma


def colorize(pos: np.ndarray, palette=DEFAULT_PALETTE) -> np.ndarray:
    """RGBA uint8 image from palette positions; NaN is fully transparent."""
    stops, colors = check_palette(palette)
    valid = np.isfinite(pos)
    p = np.where(valid, pos, 0.0)
    rgba = np.zeros(pos.shape + (4,), dtype=np.uint8)
    for ch in range(3):
        rgba[..., ch] = np.round(np.interp(p, stops, colors[:, ch])).astype(np.uint8)
    rgba[..., 3] = np.where(valid, 255, 0)
    rgba[~valid, :3] = 0
    return rgba


def render_png(chl: ChlMap, path, palette=DEFAULT_PALETTE, gamma: float = DEFAULT_GAMMA,
               vmax: float | None = None, percentile: float = 99.0) -> dict:
    """Write an RGBA PNG plus a ``.colorbar.json`` sidecar; returns the sidecar dict."""
    from PIL import Image

    check_palette(palette)
    data_max = scale_max(chl.grid, 100.0)
    if vmax is None:
        vmax = scale_max(chl.grid, percentile)
    pos = palette_positions(chl.grid, vmax, gamma)
    Image.fromarray(colorize(pos, palette)).save(path)
    n_sat = int(np.sum(np.isfinite(chl.grid) & (chl.grid > vmax))) if vmax > 0 else 0
    sidecar = {
        "vmax": vmax, "data_max": data_max, "gamma": gamma, "percentile": percentile,
        "n_saturated": n_sat, "units": "mg/m3",
        "palette": [[float(p), [int(c) for c in rgb]] for p, rgb in palette],
        # chl value at each control point: vmax * position ** (1 / gamma)
        "ticks": [float(vmax * float(p) ** (1.0 / gamma)) for p, _ in palette],
    }
    if n_sat:
        log.info("%d pixels above the colour scale maximum %.3g", n_sat, vmax)
    Path(str(path) + ".colorbar.json").write_text(json.dumps(sidecar, indent=1))
    return sidecar
