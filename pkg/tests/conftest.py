import numpy as np
import pytest

from chlmap.raster import GeoTransform, stack_from_arrays


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_stack(arrays, names=None, transform=None):
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    names = names or [f"b{i}" for i in range(len(arrays))]
    transform = transform or GeoTransform(0.0, 10.0, 1.0, -1.0, "EPSG:4326")
    return stack_from_arrays(arrays, names, transform)


LIGHT_PARAMS = {
    "RF": {"n_estimators": 5, "max_depth": 4},
    "XGB": {"n_estimators": 10, "max_depth": 3},
    "LBM": {"n_estimators": 10, "max_depth": 3},
    "CAT": {"n_estimators": 10, "max_depth": 3},
    "MLP": {"hidden_layer_sizes": [8], "max_iter": 20},
}


REPORT_OVERRIDES = {
    "windows": [1, 3], "depth_bins": ["0-1", "2-3"], "search": {"budget": 0}, "top_k": 20,
    "model_params": LIGHT_PARAMS,
}


def run_stages(cfg_path, threads=1, dates=()):
    from chlmap import pipeline
    from chlmap.config import load_config

    cfg = load_config(cfg_path)
    for stage in ("ingest", "features", "train", "select", "report"):
        getattr(pipeline, f"cmd_{stage}")(cfg, threads)
    for d in dates:
        pipeline.cmd_infer(cfg, d, threads)
    return cfg


@pytest.fixture(scope="session")
def e2e_project(tmp_path_factory):
    """30 dates, 12 buoys, one processor; the 0-1 m relation is the oracle."""
    import time

    from chlmap.synthetic import make_synthetic_project

    root = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    cfg_path = make_synthetic_project(root, n_dates=30, processors=["C2X-Complex"], config_overrides={
        "reflectance_sets": ["C2X-Complex_rhow"], "windows": [1], "depth_bins": ["0-1"],
        "models": ["LR", "XGB"], "search": {"budget": 0}, "top_k": 20,
        "final_models": {"0-1": {"dataset": "C2X-Complex_rhow_1x1", "model": "LR"}},
    })
    cfg = run_stages(cfg_path, 1, ["2018-01-08"])
    return {"root": root, "cfg": cfg, "cfg_path": cfg_path, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def report_project(tmp_path_factory):
    """Every reflectance set at two windows and two depths with all model columns."""
    from chlmap.synthetic import make_synthetic_project

    root = tmp_path_factory.mktemp("report")
    cfg_path = make_synthetic_project(root, n_dates=12, config_overrides=REPORT_OVERRIDES)
    cfg = run_stages(cfg_path, 1)
    return {"root": root, "cfg": cfg}


# acceptance criterion -> (title, passed); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}")
