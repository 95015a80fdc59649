"""``chlmap`` command line.

Exit codes: 0 success, 1 other pipeline error, 2 configuration error,
3 missing input.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ChlmapError, ConfigError, MissingInputError

log = logging.getLogger("chlmap")

STAGES = ("ingest", "features", "train", "select", "infer", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chlmap", description="Chlorophyll-a mapping pipeline")
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "merge buoy sources into depth tables and screen scenes",
        "features": "build every (depth, reflectance set, window) dataset",
        "train": "cross-validate, search and stack models; write reports",
        "select": "fit the chosen model per depth",
        "report": "write datasets x models metric tables",
    }
    for name, text in helps.items():
        sub.add_parser(name, help=text)
    inf = sub.add_parser("infer", help="chlorophyll maps for one scene date")
    inf.add_argument("--date", required=True, help="YYYY-MM-DD")
    run = sub.add_parser("run", help="ingest, features, train, select and report in order")
    run.add_argument("--date", action="append", default=[], help="also infer maps for this date")
    conv = sub.add_parser("convert", help="convert a band stack between BSF and GeoTIFF")
    conv.add_argument("src")
    conv.add_argument("dst")
    syn = sub.add_parser("synth", help="write a synthetic project (scenes, buoys, config)")
    syn.add_argument("root")
    syn.add_argument("--dates", type=int, default=30)
    return p


def _config(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def run(args) -> int:
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.command == "convert":
        from .raster import read_band_stack, write_band_stack

        write_band_stack(read_band_stack(pipeline._require(args.src, "input raster")), args.dst)
        return 0
    if args.command == "synth":
        from .synthetic import make_synthetic_project

        path = make_synthetic_project(args.root, n_dates=args.dates,
                                      seed=0 if args.seed is None else args.seed)
        print(path)
        return 0
    cfg = _config(args)
    if args.command == "infer":
        pipeline.cmd_infer(cfg, args.date, args.threads)
    elif args.command == "run":
        for stage in ("ingest", "features", "train", "select", "report"):
            getattr(pipeline, f"cmd_{stage}")(cfg, args.threads)
        for d in args.date:
            pipeline.cmd_infer(cfg, d, args.threads)
    else:
        getattr(pipeline, f"cmd_{args.command}")(cfg, args.threads)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except ChlmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
