import json

import numpy as np
import pytest

from chlmap.cli import main
from chlmap.config import default_config, load_config, validate
from chlmap.errors import ConfigError
from chlmap.raster import read_band_stack
from chlmap.synthetic import make_synthetic_project

SMALL = {"reflectance_sets": ["C2X-Complex_rhown"], "windows": [1], "depth_bins": ["0-1"],
         "models": ["LR", "KNN"], "search": {"budget": 0}, "top_k": 10}


@pytest.fixture(scope="module")
def small_project(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    return make_synthetic_project(root, n_dates=8, processors=["C2X-Complex"], config_overrides=SMALL)


def _mtimes(d):
    return {p: p.stat().st_mtime_ns for p in sorted(d.rglob("*")) if p.is_file()}


def test_run_then_rerun_is_noop(small_project, capsys):
    cfg = str(small_project)
    assert main(["--config", cfg, "run", "--date", "2018-01-08"]) == 0
    out = small_project.parent / "out"
    for stage in ("ingest", "features", "train", "select", "report", "infer/2018-01-08"):
        assert (out / stage / "manifest.json").exists()
    before = _mtimes(out)
    assert main(["--config", cfg, "run", "--date", "2018-01-08"]) == 0
    assert _mtimes(out) == before
    sel = json.loads((out / "select" / "selection.json").read_text())
    assert sel["0-1"]["model"] in ("LR", "KNN")
    assert len(list((out / "features").glob("*_depth_in_*.csv"))) == 1


def test_changed_config_reruns_downstream(small_project, tmp_path):
    cfg = json.loads(small_project.read_text())
    cfg["paths"] = {k: (str(small_project.parent / v) if isinstance(v, str) else
                        [str(small_project.parent / x) for x in v]) for k, v in cfg["paths"].items()}
    cfg["paths"]["output_dir"] = str(tmp_path / "out")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["--config", str(p), "ingest"]) == 0
    assert main(["--config", str(p), "features"]) == 0
    m1 = (tmp_path / "out" / "features" / "manifest.json").stat().st_mtime_ns
    cfg["windows"] = [3]
    p.write_text(json.dumps(cfg))
    assert main(["--config", str(p), "features"]) == 0
    assert (tmp_path / "out" / "features" / "manifest.json").stat().st_mtime_ns != m1
    assert (tmp_path / "out" / "features" / "C2X-Complex_rhown_3x3_depth_in_0_1.csv").exists()


def test_exit_codes(small_project, tmp_path, capsys):
    assert main(["ingest"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["--config", str(bad), "ingest"]) == 2
    bad.write_text(json.dumps({"schema_version": 1, "windows": [2]}))
    assert main(["--config", str(bad), "ingest"]) == 2
    assert "window" in capsys.readouterr().err
    missing = tmp_path / "m.json"
    missing.write_text(json.dumps({"schema_version": 1, "paths": {
        "scene_catalog": "nowhere.json", "upct_csvs": ["u.csv"]}}))
    assert main(["--config", str(missing), "ingest"]) == 3
    empty_out = tmp_path / "e.json"
    empty_out.write_text(json.dumps({"schema_version": 1, "paths": {"output_dir": "fresh"}}))
    assert main(["--config", str(empty_out), "train"]) == 3
    assert main(["--config", str(empty_out), "infer", "--date", "2018-01-08"]) == 3
    assert main(["--threads", "0", "--config", str(small_project), "report"]) == 2


def test_infer_unknown_date_is_missing_input(small_project):
    assert main(["--config", str(small_project), "run"]) == 0
    assert main(["--config", str(small_project), "infer", "--date", "1999-01-01"]) == 3


def test_convert_roundtrip(small_project, tmp_path):
    src = sorted((small_project.parent / "scenes").glob("*.bsf"))[0]
    assert main(["convert", str(src), str(tmp_path / "s.tif")]) == 0
    assert main(["convert", str(tmp_path / "s.tif"), str(tmp_path / "s.bsf")]) == 0
    assert (tmp_path / "s.bsf").read_bytes() == src.read_bytes()
    assert main(["convert", str(tmp_path / "none.bsf"), str(tmp_path / "x.tif")]) == 3


def test_synth_command(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "p"), "--dates", "2"]) == 0
    cfg = load_config(capsys.readouterr().out.strip())
    assert cfg["final_models"] == "auto"
    s = read_band_stack(sorted((tmp_path / "p" / "scenes").glob("*.bsf"))[0])
    assert s.count == 28 and (s.height, s.width) == (64, 64)


def test_config_validation():
    cfg = default_config()
    assert validate(cfg) is cfg
    for key, value in [("schema_version", 2), ("seed", "x"), ("models", ["SVM"]),
                       ("depth_bins", ["4-5"]), ("toa_source", "L2A"), ("chunk_rows", 0)]:
        c = default_config()
        c[key] = value
        with pytest.raises(ConfigError):
            validate(c)
    c = default_config()
    c["render"]["palette"] = [[0.5, [0, 0, 0]], [0.2, [1, 1, 1]]]
    with pytest.raises(ConfigError):
        validate(c)
    c = default_config()
    c["bogus"] = 1
    with pytest.raises(ConfigError):
        validate(c)
