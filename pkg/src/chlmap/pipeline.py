"""Pipeline stages run by the command line: ingest, features, train, select, infer, report.

Every stage reads the previous stage's files under ``output_dir`` and writes
its own directory plus a ``manifest.json`` holding input-file hashes and a
hash of the configuration it depends on. A stage whose manifest still
matches is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import pickle
import zlib
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import config_hash
from .errors import ChlmapError, ConfigError, DomainError, MissingInputError
from .features import (build_dataset, dataset_id, get_reflectance_set, parse_dataset_id,
                       read_feature_table, screen_features, write_feature_table)
from .ingest import (bin_depths, filter_scenes, load_buoy_source, load_scene_catalog,
                     merge_sources, read_depth_table, read_exclusion_list, save_scene_catalog,
                     valid_pixel_fraction, with_valid_fraction, write_depth_tables)
from .mapping import (DEFAULT_PALETTE, extract_all_pixels, predict_map, render_png,
                      write_chl_map)
from .models import (MODEL_COLUMNS, SUBSTITUTIONS, UNSUPPORTED_COLUMNS, ModelSpec,
                     default_spec, fit_model, load_model, save_model)
from .raster import crop_geo, erode_mask, load_geojson_mask, rasterize_polygon, read_band_stack, resample_nearest

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# Stage bookkeeping
# ---------------------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing {what}: {path}")
    return path


def _hash_inputs(paths) -> dict:
    return {str(p): file_hash(p) for p in sorted(set(map(str, paths)))}


def _is_current(stage_dir: Path, inputs: dict, params: str) -> bool:
    mpath = stage_dir / MANIFEST
    if not mpath.exists():
        return False
    try:
        m = json.loads(mpath.read_text())
    except ValueError:
        return False
    if m.get("inputs") != inputs or m.get("params") != params:
        return False
    return all((stage_dir / o).exists() for o in m.get("outputs", []))


def _write_manifest(stage_dir: Path, stage: str, inputs: dict, params: str, outputs) -> None:
    m = {"stage": stage, "inputs": inputs, "params": params,
         "outputs": sorted(str(Path(o).relative_to(stage_dir)) for o in outputs)}
    (stage_dir / MANIFEST).write_text(json.dumps(m, sort_keys=True, indent=1))


def _out(cfg, stage: str) -> Path:
    return Path(cfg["paths"]["output_dir"]) / stage


def processor_for(rset, cfg) -> str:
    return rset.processor or cfg["toa_source"]


def load_scene(path, cfg):
    stack = read_band_stack(_require(path, "scene raster"))
    if cfg["crop_to_bbox"]:
        bb = cfg["bbox"]
        stack = crop_geo(stack, bb["north"], bb["west"], bb["south"], bb["east"])
    if cfg["resample_to"]:
        stack = resample_nearest(stack, float(cfg["resample_to"]))
    return stack


def _label_spec(cfg, label: str) -> ModelSpec:
    spec = default_spec(label, cfg["seed"])
    return spec.with_params(**cfg["model_params"].get(label, {}))


def _search_space(cfg, spec: ModelSpec):
    spaces = cfg["search"]["spaces"]
    return spaces.get(spec.label, spaces.get(spec.kind))


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(cfg, threads: int = 1) -> dict:
    """Per-depth merged buoy tables and the screened scene list."""
    paths = cfg["paths"]
    out = _out(cfg, "ingest")
    if not paths["scene_catalog"]:
        raise ConfigError("paths.scene_catalog is not set")
    catalog_path = _require(paths["scene_catalog"], "scene catalog")
    csvs = [(_require(p, "UPCT buoy CSV"), "UPCT") for p in paths["upct_csvs"]]
    csvs += [(_require(p, "IMIDA buoy CSV"), "IMIDA") for p in paths["imida_csvs"]]
    if not csvs:
        raise ConfigError("no buoy CSVs configured (paths.upct_csvs / paths.imida_csvs)")
    catalog = load_scene_catalog(catalog_path)
    excl_path = paths.get("exclusion_list")
    inputs_list = [catalog_path] + [p for p, _ in csvs] + [_require(e.path, "scene raster") for e in catalog]
    if excl_path:
        inputs_list.append(_require(excl_path, "exclusion list"))
    inputs = _hash_inputs(inputs_list)
    params = config_hash(cfg, ["bbox", "thresholds", "crop_to_bbox"])
    if _is_current(out, inputs, params):
        log.info("ingest: up to date")
        return {"skipped": True}
    out.mkdir(parents=True, exist_ok=True)

    per_source = {}
    for p, schema in csvs:
        per_source.setdefault(schema, []).extend(load_buoy_source(p, schema))
    tables = [bin_depths(per_source[s]) for s in ("UPCT", "IMIDA") if s in per_source]
    merged = tables[0] if len(tables) == 1 else merge_sources(tables[0], tables[1])
    written = list(write_depth_tables(merged, out).values())

    screened = []
    for e in catalog:
        if e.valid_pixel_fraction is None:
            stack = read_band_stack(e.path)
            e = with_valid_fraction(e, valid_pixel_fraction(stack, cfg["bbox"]))
        screened.append(e)
    exclude = read_exclusion_list(excl_path) if excl_path else set()
    th = cfg["thresholds"]
    kept = filter_scenes(screened, th["max_cloud_pct"], th["min_valid_fraction"], exclude)
    scenes_path = out / "scenes.json"
    save_scene_catalog(kept, scenes_path)
    written.append(scenes_path)
    _write_manifest(out, "ingest", inputs, params, written)
    log.info("ingest: %d buoy cells, %d of %d scenes kept", len(merged), len(kept), len(catalog))
    return {"skipped": False, "n_cells": len(merged), "n_scenes": len(kept)}


def _ingested(cfg):
    d = _out(cfg, "ingest")
    scenes = load_scene_catalog(_require(d / "scenes.json", "ingest output scenes.json (run `ingest`)"))
    tables = {b: _require(d / f"chl_depth_{b}.csv", f"ingest output for depth {b} (run `ingest`)")
              for b in cfg["depth_bins"]}
    return scenes, tables


def _scene_index(scenes):
    """(processor, date) -> path; the first path wins when tiles repeat."""
    idx = {}
    for e in scenes:
        key = (e.processor, e.date)
        if key in idx:
            log.warning("several scenes for %s on %s; using %s", e.processor, e.date, idx[key])
            continue
        idx[key] = e.path
    return idx


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def cmd_features(cfg, threads: int = 1) -> dict:
    """Write every (depth, reflectance set, window) dataset."""
    scenes, table_paths = _ingested(cfg)
    out = _out(cfg, "features")
    inputs = _hash_inputs([_out(cfg, "ingest") / "scenes.json", *table_paths.values(),
                           *[e.path for e in scenes]])
    params = config_hash(cfg, ["windows", "reflectance_sets", "depth_bins", "toa_source",
                               "bbox", "crop_to_bbox", "resample_to"])
    if _is_current(out, inputs, params):
        log.info("features: up to date")
        return {"skipped": True}
    out.mkdir(parents=True, exist_ok=True)
    buoys = {b: read_depth_table(p, b) for b, p in table_paths.items()}
    wanted_dates = set()
    for df in buoys.values():
        wanted_dates.update(df["Date"])
    index = _scene_index(scenes)
    stacks: dict = {}

    def scenes_for(proc):
        if proc not in stacks:
            stacks[proc] = [(d, load_scene(p, cfg)) for (pr, d), p in sorted(index.items())
                            if pr == proc and d in wanted_dates]
        return stacks[proc]

    written, listing = [], {}
    for depth in cfg["depth_bins"]:
        for set_name in cfg["reflectance_sets"]:
            rset = get_reflectance_set(set_name)
            sc = scenes_for(processor_for(rset, cfg))
            for w in cfg["windows"]:
                table = build_dataset(buoys[depth], sc, rset, w, depth)
                path = out / f"{table.dataset_id}.csv"
                write_feature_table(table, path)
                written.append(path)
                listing[table.dataset_id] = {"file": path.name, "rows": len(table),
                                             "n_dropped": table.n_dropped,
                                             "n_features": len(table.feature_names)}
    lpath = out / "datasets.json"
    lpath.write_text(json.dumps(listing, sort_keys=True, indent=1))
    written.append(lpath)
    _write_manifest(out, "features", inputs, params, written)
    log.info("features: wrote %d datasets", len(listing))
    return {"skipped": False, "datasets": sorted(listing)}


def _dataset_path(cfg, ds_id: str) -> Path:
    return _require(_out(cfg, "features") / f"{ds_id}.csv", f"dataset {ds_id} (run `features`)")


def _dataset_ids(cfg, depth: str) -> list[str]:
    return [dataset_id(s, w, depth) for s in cfg["reflectance_sets"] for w in cfg["windows"]]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _plan_for(cfg, table):
    sp = cfg["split"]
    return ev.make_split_plan(table.y, cfg["seed"], cfg["thresholds"]["high_chl"],
                              sp["test_fraction"], sp["folds"])


def _failed(ds_id, spec, msg, table=None):
    return ev.EvalReport(ds_id, spec.label, spec.kind, status="failed", error=msg,
                         hyperparameters=dict(spec.params), seed=spec.seed,
                         n_dropped=0 if table is None else table.n_dropped)


def _sub_seed(seed: int, *parts) -> int:
    return (seed * 1_000_003 + zlib.crc32(":".join(parts).encode())) % (2 ** 32)


def train_depth(cfg, depth: str, threads: int = 1):
    """Preliminary screening, search and final CV for one depth bin."""
    top_k = cfg["top_k"]
    specs = [_label_spec(cfg, m) for m in cfg["models"]]
    tables, plans, prelim = {}, {}, []
    for ds in _dataset_ids(cfg, depth):
        table = read_feature_table(_dataset_path(cfg, ds))
        tables[ds] = table
        try:
            plans[ds] = _plan_for(cfg, table)
        except DomainError as exc:
            log.warning("%s: %s", ds, exc)
            prelim.extend(_failed(ds, s, f"too few rows for the split: {exc}", table) for s in specs)
            continue
        for spec in specs:
            rep = ev.cross_validate(spec, table, plans[ds], top_k, threads).report
            rep.meta["stage"] = "preliminary"
            prelim.append(rep)
    selected = ev.rank_datasets(prelim, cfg["top_datasets"]["per_processor"])

    final, session = [], {}
    budget = int(cfg["search"]["budget"])
    for ds in selected:
        table, plan = tables[ds], plans[ds]
        results, trials = {}, {}
        for spec in specs:
            space = _search_space(cfg, spec)
            if budget > 0 and space:
                try:
                    sr = ev.random_search(spec, space, budget, table, plan,
                                          _sub_seed(cfg["seed"], ds, spec.label), top_k, threads)
                    spec = spec.with_params(**sr.best_params)
                    trials[spec.label] = sr.trials
                except ChlmapError as exc:
                    log.warning("search failed for %s / %s: %s", ds, spec.label, exc)
            res = ev.cross_validate(spec, table, plan, top_k, threads)
            res.report.meta["stage"] = "final"
            if spec.label in trials:
                res.report.meta["search_trials"] = len(trials[spec.label])
            final.append(res.report)
            if res.report.ok:
                results[spec.label] = res
        train = plan.train_rows
        if cfg["ensemble"]["enabled"] and results:
            labels = sorted(results)
            oof = np.column_stack([results[m].oof[train] for m in labels])
            tp = np.column_stack([results[m].test_pred for m in labels])
            ens = ev.evaluate_ensemble(oof, table.y[train], plan.fold[train], tp,
                                       table.y[plan.test_rows], cfg["ensemble"]["lambda_l2"],
                                       ds, labels)
            ens.report.meta["stage"] = "final"
            ens.report.n_dropped = table.n_dropped
            ens.report.seed = cfg["seed"]
            final.append(ens.report)
        session[ds] = {"plan": plan.to_dict(), "trials": trials,
                       "oof": {m: r.oof for m, r in results.items()},
                       "test_pred": {m: r.test_pred for m, r in results.items()}}
    return prelim, final, selected, session


def cmd_train(cfg, threads: int = 1) -> dict:
    out = _out(cfg, "train")
    ids = [ds for d in cfg["depth_bins"] for ds in _dataset_ids(cfg, d)]
    inputs = _hash_inputs([_dataset_path(cfg, ds) for ds in ids])
    params = config_hash(cfg, ["models", "model_params", "search", "seed", "split", "top_k",
                               "thresholds", "ensemble", "top_datasets"])
    if _is_current(out, inputs, params):
        log.info("train: up to date")
        return {"skipped": True}
    out.mkdir(parents=True, exist_ok=True)
    doc = {"preliminary": [], "final": [], "selected": {},
           "substitutions": SUBSTITUTIONS, "unsupported": UNSUPPORTED_COLUMNS}
    session = {}
    for depth in cfg["depth_bins"]:
        prelim, final, selected, sess = train_depth(cfg, depth, threads)
        doc["preliminary"] += [r.to_dict() for r in prelim]
        doc["final"] += [r.to_dict() for r in final]
        doc["selected"][depth] = selected
        session[depth] = sess
    rpath = out / "reports.json"
    rpath.write_text(json.dumps(doc, sort_keys=True, indent=1))
    spath = out / "session.pkl"
    with open(spath, "wb") as fh:
        pickle.dump({"reports": doc, "session": session}, fh, protocol=4)
    _write_manifest(out, "train", inputs, params, [rpath, spath])
    return {"skipped": False, "n_final": len(doc["final"])}


def _load_reports(cfg):
    path = _require(_out(cfg, "train") / "reports.json", "training reports (run `train`)")
    doc = json.loads(path.read_text())
    doc["final"] = [ev.EvalReport.from_dict(d) for d in doc["final"]]
    doc["preliminary"] = [ev.EvalReport.from_dict(d) for d in doc["preliminary"]]
    return path, doc


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------

def _choose(cfg, depth: str, reports):
    fm = cfg["final_models"]
    sel = "auto" if fm == "auto" else fm.get(depth, "auto")
    depth_reps = [r for r in reports if parse_dataset_id(r.dataset_id)[2] == depth]
    if sel == "auto":
        cands = [r for r in depth_reps if r.ok and r.model != "ENS" and r.val_r2 is not None]
        if not cands:
            raise MissingInputError(f"no successful model for depth {depth} to select")
        best = min(cands, key=lambda r: (-r.val_r2, r.val_rmse, r.dataset_id, r.model))
        return best.dataset_id, best.model, dict(best.hyperparameters), "auto"
    ds = f"{sel['dataset']}_depth_in_{depth.replace('-', '_')}"
    for r in depth_reps:
        if r.dataset_id == ds and r.model == sel["model"] and r.ok:
            return ds, sel["model"], dict(r.hyperparameters), "configured"
    log.warning("no final report for %s / %s; using default hyperparameters", ds, sel["model"])
    return ds, sel["model"], dict(_label_spec(cfg, sel["model"]).params), "configured-default"


def cmd_select(cfg, threads: int = 1) -> dict:
    """Pick the map model per depth and fit it on the training rows."""
    out = _out(cfg, "select")
    rpath, doc = _load_reports(cfg)
    choices = {d: _choose(cfg, d, doc["final"]) for d in cfg["depth_bins"]}
    ds_paths = [_dataset_path(cfg, c[0]) for c in choices.values()]
    inputs = _hash_inputs([rpath, *ds_paths])
    params = config_hash(cfg, ["final_models", "models", "model_params", "seed", "split",
                               "top_k", "thresholds"])
    if _is_current(out, inputs, params):
        log.info("select: up to date")
        return {"skipped": True}
    (out / "models").mkdir(parents=True, exist_ok=True)
    selection, written = {}, []
    for depth, (ds, label, hparams, how) in choices.items():
        table = read_feature_table(_dataset_path(cfg, ds))
        plan = _plan_for(cfg, table)
        train = plan.train_rows
        names = screen_features(table, train, cfg["top_k"]) if cfg["top_k"] else list(table.feature_names)
        spec = default_spec(label, cfg["seed"])
        spec = ModelSpec(spec.kind, hparams, spec.needs_scaling, cfg["seed"], label)
        set_name, w, _ = parse_dataset_id(ds)
        model = fit_model(spec, table.columns(names)[train], table.y[train], names, threads,
                          metadata={"dataset_id": ds, "set": set_name, "window": w,
                                    "depth_bin": depth, "n_train": int(train.size),
                                    "dataset_sha256": file_hash(_dataset_path(cfg, ds))})
        mpath = out / "models" / f"model_{depth}.json"
        save_model(model, mpath)
        written.append(mpath)
        selection[depth] = {"dataset_id": ds, "model": label, "kind": spec.kind, "how": how,
                            "hyperparameters": hparams, "model_file": str(mpath.relative_to(out)),
                            "model_sha256": model.hash(), "n_features": len(names)}
    spath = out / "selection.json"
    spath.write_text(json.dumps(selection, sort_keys=True, indent=1))
    written.append(spath)
    _write_manifest(out, "select", inputs, params, written)
    return {"skipped": False, "selection": selection}


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _map_mask(cfg, stack):
    mpath = cfg["paths"].get("mask_geojson")
    if mpath:
        mask = rasterize_polygon(load_geojson_mask(_require(mpath, "mask GeoJSON")), stack)
    else:
        mask = np.ones((stack.height, stack.width), dtype=bool)
    radius = int(cfg["render"].get("erode_radius") or 0)
    return erode_mask(mask, radius) if radius > 0 else mask


def cmd_infer(cfg, date, threads: int = 1) -> dict:
    """One chlorophyll map per selected depth for the scene(s) of ``date``."""
    from .ingest import parse_date

    date = parse_date(date)
    sel_dir = _out(cfg, "select")
    spath = _require(sel_dir / "selection.json", "model selection (run `select`)")
    selection = json.loads(spath.read_text())
    scenes, _ = _ingested(cfg)
    index = _scene_index(scenes)
    out = _out(cfg, "infer") / date.isoformat()

    jobs, inputs_list = [], [spath]
    for depth in cfg["depth_bins"]:
        if depth not in selection:
            raise MissingInputError(f"selection has no model for depth {depth} (re-run `select`)")
        s = selection[depth]
        rset = get_reflectance_set(parse_dataset_id(s["dataset_id"])[0])
        proc = processor_for(rset, cfg)
        if (proc, date) not in index:
            raise MissingInputError(f"no screened {proc} scene for {date} in the ingest scene list")
        mfile = _require(sel_dir / s["model_file"], f"model file for depth {depth}")
        jobs.append((depth, s, rset, index[(proc, date)], mfile))
        inputs_list += [index[(proc, date)], mfile]
    if cfg["paths"].get("mask_geojson"):
        inputs_list.append(cfg["paths"]["mask_geojson"])
    inputs = _hash_inputs(inputs_list)
    params = config_hash(cfg, ["render", "bbox", "crop_to_bbox", "resample_to", "chunk_rows"])
    if _is_current(out, inputs, params):
        log.info("infer %s: up to date", date)
        return {"skipped": True}
    out.mkdir(parents=True, exist_ok=True)
    render = cfg["render"]
    palette = render["palette"] or DEFAULT_PALETTE
    written, maps = [], {}
    for depth, s, rset, scene_path, mfile in jobs:
        model = load_model(mfile)
        stack = load_scene(scene_path, cfg)
        mask = _map_mask(cfg, stack)
        w = parse_dataset_id(s["dataset_id"])[1]
        table = extract_all_pixels(stack, mask, rset, w, model.feature_names,
                                   int(cfg["chunk_rows"]), n_jobs=threads)
        chl = predict_map(model, table, stack, depth, provenance={
            "date": date.isoformat(), "dataset_id": s["dataset_id"], "model": s["model"],
            "model_sha256": model.hash(), "config_sha256": config_hash(cfg),
            "scene": Path(scene_path).name})
        stem = f"chl_{depth}"
        paths = write_chl_map(chl, out, stem)
        png = out / f"{stem}.png"
        render_png(chl, png, palette, render["gamma"], percentile=render["percentile"])
        written += list(paths.values()) + [png, Path(str(png) + ".colorbar.json")]
        maps[depth] = chl
    _write_manifest(out, "infer", inputs, params, written)
    return {"skipped": False, "maps": maps, "dir": out}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _fmt(v):
    return "NA" if v is None else f"{v:.2f}"


def report_tables(cfg, reports) -> dict:
    """depth -> {"rows": [...], "test_r2": matrix, "test_rmse": matrix}."""
    n_rows = cfg["top_datasets"]["report_rows"]
    out = {}
    for depth in cfg["depth_bins"]:
        reps = [r for r in reports if parse_dataset_id(r.dataset_id)[2] == depth]
        ranked = ev.rank_datasets(reps, None)[:n_rows]
        by_key = {(r.dataset_id, r.model): r for r in reps}
        tables = {"rows": ranked, "labels": [], "test_r2": [], "test_rmse": []}
        for ds in ranked:
            set_name, w, _ = parse_dataset_id(ds)
            tables["labels"].append(f"{set_name}_{w}x{w}")
            for metric in ("test_r2", "test_rmse"):
                row = []
                for col in MODEL_COLUMNS:
                    r = by_key.get((ds, col))
                    row.append(getattr(r, metric) if r is not None and r.ok else None)
                tables[metric].append(row)
        out[depth] = tables
    return out


def cmd_report(cfg, threads: int = 1) -> dict:
    """Datasets x models matrices of test R2 and RMSE per depth (CSV and JSON)."""
    out = _out(cfg, "report")
    rpath, doc = _load_reports(cfg)
    inputs = _hash_inputs([rpath])
    params = config_hash(cfg, ["top_datasets", "depth_bins"])
    if _is_current(out, inputs, params):
        log.info("report: up to date")
        return {"skipped": True}
    out.mkdir(parents=True, exist_ok=True)
    tables = report_tables(cfg, doc["final"])
    written = []
    for depth, t in tables.items():
        for metric in ("test_r2", "test_rmse"):
            p = out / f"{metric}_depth_{depth}.csv"
            with open(p, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["Dataset", *MODEL_COLUMNS])
                for label, row in zip(t["labels"], t[metric]):
                    wr.writerow([label, *[_fmt(v) for v in row]])
            written.append(p)
    jpath = out / "report.json"
    jpath.write_text(json.dumps({"columns": list(MODEL_COLUMNS), "depths": tables,
                                 "substitutions": SUBSTITUTIONS,
                                 "unsupported": UNSUPPORTED_COLUMNS}, sort_keys=True, indent=1))
    written.append(jpath)
    _write_manifest(out, "report", inputs, params, written)
    return {"skipped": False, "tables": tables}
