"""Pipeline configuration: a JSON document merged over built-in defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .features import REFLECTANCE_SETS, WINDOW_SIZES
from .ingest import DEPTH_BINS
from .models import ESTIMATORS, MODEL_COLUMNS, UNSUPPORTED_COLUMNS

SCHEMA_VERSION = 1

DEFAULT_SEARCH_SPACES = {
    "KNN": {"n_neighbors": {"type": "int", "low": 1, "high": 15}},
    "RF": {"n_estimators": {"type": "int", "low": 100, "high": 500},
           "max_depth": {"type": "int", "low": 2, "high": 12}},
    "GBT": {"n_estimators": {"type": "int", "low": 50, "high": 500},
            "learning_rate": {"type": "float", "low": 0.01, "high": 0.3},
            "max_depth": {"type": "int", "low": 2, "high": 8},
            "reg_lambda": {"type": "float", "low": 0.0, "high": 10.0}},
    "ELN": {"alpha": {"type": "log", "low": 1e-4, "high": 10.0},
            "l1_ratio": {"type": "float", "low": 0.0, "high": 1.0}},
    "MLP": {"hidden_layer_sizes": {"type": "layers", "min_layers": 1, "max_layers": 2,
                                   "low": 8, "high": 64}},
    "LR": {},
}

# final (dataset, model) per depth; "auto" picks the best validated pair
PAPER_FINAL_MODELS = {
    "0-1": {"dataset": "C2X-Complex_rhow_9x9", "model": "XGB"},
    "1-2": {"dataset": "C2X-Complex_rhow_5x5", "model": "CAT"},
    "2-3": {"dataset": "TOA_15x15", "model": "KNN"},
    "3-4": {"dataset": "C2X-Complex_rhow_5x5", "model": "RF"},
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "paths": {
        "scene_catalog": None,
        "upct_csvs": [],
        "imida_csvs": [],
        "output_dir": "out",
        "mask_geojson": None,
        "exclusion_list": None,
    },
    "bbox": {"north": 37.82, "west": -0.867, "south": 37.62, "east": -0.7},
    "crop_to_bbox": True,
    "resample_to": None,
    "windows": list(WINDOW_SIZES),
    "reflectance_sets": ["TOA", "C2RCC_rhow", "C2RCC_rhown", "C2X_rhow", "C2X_rhown",
                         "C2X-Complex_rhow", "C2X-Complex_rhown"],
    "toa_source": "C2RCC",
    "depth_bins": list(DEPTH_BINS),
    "thresholds": {"max_cloud_pct": 20.0, "min_valid_fraction": 0.5, "high_chl": 5.0},
    "seed": 0,
    "split": {"test_fraction": 0.25, "folds": 5},
    "top_k": 100,
    "models": [c for c in MODEL_COLUMNS if c != "ENS" and c not in UNSUPPORTED_COLUMNS],
    "model_params": {},
    "ensemble": {"enabled": True, "lambda_l2": 1.0},
    "search": {"budget": 20, "spaces": DEFAULT_SEARCH_SPACES},
    "top_datasets": {"per_processor": 10, "report_rows": 10},
    "final_models": PAPER_FINAL_MODELS,
    "render": {"palette": None, "gamma": 0.5, "percentile": 99.0, "erode_radius": 0},
    "chunk_rows": 32,
}

_PATH_KEYS = ("scene_catalog", "output_dir", "mask_geojson", "exclusion_list")


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            out[k] = _merge(base[k], v) if k in base and k != "spaces" else copy.deepcopy(v)
        return out
    return copy.deepcopy(over)


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def validate(cfg: dict) -> dict:
    """Raise ConfigError on anything the pipeline cannot run with."""
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for s in cfg["reflectance_sets"]:
        if s not in REFLECTANCE_SETS:
            raise ConfigError(f"unknown reflectance set {s!r}")
    for w in cfg["windows"]:
        if not isinstance(w, int) or w < 1 or w % 2 == 0:
            raise ConfigError(f"window {w!r} must be a positive odd integer")
    for b in cfg["depth_bins"]:
        if b not in DEPTH_BINS:
            raise ConfigError(f"unknown depth bin {b!r}")
    if cfg["toa_source"] not in ("C2RCC", "C2X", "C2X-Complex"):
        raise ConfigError(f"toa_source {cfg['toa_source']!r} is not a processor")
    from .models import default_spec

    for m in cfg["models"]:
        try:
            default_spec(m)
        except KeyError:
            raise ConfigError(f"unknown model {m!r}") from None
    for m in cfg["model_params"]:
        if m not in cfg["models"]:
            raise ConfigError(f"model_params given for unconfigured model {m!r}")
    for kind in cfg["search"]["spaces"]:
        if kind not in ESTIMATORS and kind not in MODEL_COLUMNS:
            raise ConfigError(f"search space for unknown model {kind!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an explicit integer")
    bb = cfg["bbox"]
    if not (bb["north"] > bb["south"] and bb["east"] > bb["west"]):
        raise ConfigError("bbox needs north > south and east > west")
    fm = cfg["final_models"]
    if fm != "auto":
        if not isinstance(fm, dict):
            raise ConfigError("final_models must be 'auto' or a per-depth mapping")
        for depth, sel in fm.items():
            if sel == "auto":
                continue
            if depth not in DEPTH_BINS or not {"dataset", "model"} <= set(sel):
                raise ConfigError(f"bad final_models entry for {depth!r}")
    if int(cfg["chunk_rows"]) < 1:
        raise ConfigError("chunk_rows must be >= 1")
    if cfg["render"]["palette"] is not None:
        from .mapping import check_palette

        check_palette(cfg["render"]["palette"])
    if cfg["render"]["gamma"] <= 0:
        raise ConfigError("render.gamma must be positive")
    return cfg


def load_config(path) -> dict:
    """Read, merge over defaults, resolve relative paths and validate."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        cfg = _merge(DEFAULTS, raw)
    except KeyError as exc:
        raise ConfigError(f"{path}: bad key {exc}") from None
    base = path.parent.resolve()
    paths = cfg["paths"]
    for k in _PATH_KEYS:
        if paths.get(k):
            paths[k] = str((base / paths[k]).resolve())
    for k in ("upct_csvs", "imida_csvs"):
        paths[k] = [str((base / p).resolve()) for p in paths[k]]
    return validate(cfg)


def config_hash(cfg: dict, keys=None) -> str:
    part = cfg if keys is None else {k: cfg[k] for k in keys}
    return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()
