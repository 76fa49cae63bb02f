import json
from pathlib import Path

import numpy as np
import pytest

from lidarbiomass import synth
from lidarbiomass.cli import main
from lidarbiomass.las_io import read_las, write_las


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    """A small scene on disk: LAS cloud, polygon CSV, truth CSV, scene cfg."""
    root = tmp_path_factory.mktemp("cli_scene")
    spec = synth.SceneSpec(stem_density=700.0, height_range=(2.5, 9.0),
                           point_density=12.0, seed=21)
    cloud, inventory = synth.generate(spec, plot_id="A")
    write_las(cloud, root / "scene.las")
    synth.write_truth_csv(root / "trees.csv", [inventory])
    with open(root / "polygons.csv", "w") as fh:
        fh.write("plot_id,x,y\n")
        for x, y in spec.polygon():
            fh.write(f"A,{x},{y}\n")
    (root / "scene.cfg").write_text(
        "[scene]\nstem_density = 400\nheight_max = 8\npoint_density = 8\nseed = 5\n")
    return root


def test_ingest_tiles(scene_dir, tmp_path):
    out = tmp_path / "tiles"
    assert main(["ingest", "--input", str(scene_dir / "scene.las"),
                 "--tile-size", "125", "--out", str(out)]) == 0
    tiles = list(out.glob("tile_*.las"))
    assert tiles
    total = sum(len(read_las(t)) for t in tiles)
    assert total == len(read_las(scene_dir / "scene.las"))


def test_preprocess_metrics_simulate_chain(scene_dir, tmp_path):
    prep = tmp_path / "prep"
    assert main(["preprocess", "--tiles", str(scene_dir), "--out", str(prep)]) == 0
    normalized = prep / "scene_normalized.las"
    classified = prep / "scene_classified.las"
    assert normalized.exists() and classified.exists()
    assert (prep / "scene_ground.grid").exists()

    metrics_csv = tmp_path / "metrics.csv"
    assert main(["metrics", "--plot", str(scene_dir / "polygons.csv"),
                 "--cloud", str(normalized), "--system", "ULS_D",
                 "--out", str(metrics_csv)]) == 0
    header = metrics_csv.read_text().splitlines()[0]
    assert header.startswith("plot_id,system,")
    assert "Elev.P95" in header

    wf_dir = tmp_path / "wf"
    assert main(["simulate", "--cloud", str(classified),
                 "--plot", str(scene_dir / "polygons.csv"),
                 "--diameter", "25", "--out", str(wf_dir)]) == 0
    assert (wf_dir / "A_f0.txt").exists()
    assert (wf_dir / "metrics_SLS_FW.csv").exists()


def test_simulate_grid_mode(scene_dir, tmp_path):
    prep = tmp_path / "prep"
    assert main(["preprocess", "--tiles", str(scene_dir), "--out", str(prep)]) == 0
    wf_dir = tmp_path / "wf_grid"
    assert main(["simulate", "--cloud", str(prep / "scene_classified.las"),
                 "--plot", str(scene_dir / "polygons.csv"),
                 "--spacing", "10", "--out", str(wf_dir)]) == 0
    dumps = sorted(wf_dir.glob("A_f*.txt"))
    assert len(dumps) == 10  # 2 x 5 grid inside the 20 x 50 m plot
    rows = (wf_dir / "metrics_SLS_FW.csv").read_text().splitlines()
    assert len(rows) == 2  # header + one aggregated row per plot


def test_inventory_select_fit_predict(scene_dir, tmp_path):
    plots_csv = tmp_path / "plots.csv"
    assert main(["inventory", "--trees", str(scene_dir / "trees.csv"),
                 "--out", str(plots_csv)]) == 0
    assert "AGBt_Mg_ha" in plots_csv.read_text().splitlines()[0]


def test_full_run_and_stage_gating(tmp_path):
    cfg = tmp_path / "pipeline.cfg"
    cfg.write_text(
        "[paths]\nout = artifacts\n\n"
        "[pipeline]\nseed = 123\n\n"
        "[synth]\nn_plots = 5\npoint_density = 10\nsparse_density = 6\n")
    assert main(["run", "--config", str(cfg), "--only", "metrics"]) == 0
    out = tmp_path / "artifacts"
    assert (out / "metrics_ULS_D.csv").exists()
    # stage gating stops before any modeling artifacts appear
    assert not (out / "summary.csv").exists()

    assert main(["run", "--config", str(cfg)]) == 0
    assert (out / "summary.csv").exists()
    assert (out / "plots.csv").exists()
    selections = list(out.glob("selection_*: *json")) or list(out.glob("selection_*.json"))
    assert selections
    for path in selections:
        payload = json.loads(path.read_text())
        assert payload["selected"]

    # a model file exists per system/target/model combination
    models = list(out.glob("model_*_svr.json"))
    assert len(models) == 6  # 3 systems x 2 targets

    # predict CLI applies a stored model to the pipeline's own metrics
    pred_out = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(out / "model_ULS_D_AGBt_svr.json"),
                 "--features", str(out / "metrics_ULS_D.csv"),
                 "--out", str(pred_out)]) == 0
    lines = pred_out.read_text().splitlines()
    assert lines[0] == "plot_id,predicted"
    assert len(lines) == 6


def test_evaluate_command(tmp_path, rng):
    obs = rng.uniform(20, 150, 8)
    pred_a = obs * (1 + rng.normal(0, 0.05, 8))
    pred_b = obs * (1 + rng.normal(0, 0.10, 8))
    pred_csv = tmp_path / "pred.csv"
    with open(pred_csv, "w") as fh:
        fh.write("plot_id,system,predicted\n")
        for i, (a, b) in enumerate(zip(pred_a, pred_b)):
            fh.write(f"p{i},ALS_D,{a}\n")
            fh.write(f"p{i},ULS_D,{b}\n")
    obs_csv = tmp_path / "obs.csv"
    with open(obs_csv, "w") as fh:
        fh.write("plot_id,observed\n")
        for i, o in enumerate(obs):
            fh.write(f"p{i},{o}\n")
    out = tmp_path / "eval"
    assert main(["evaluate", "--pred", str(pred_csv), "--obs", str(obs_csv),
                 "--compare", "ALS_D", "ULS_D", "--out", str(out)]) == 0
    assert (out / "comparison.csv").exists()
    assert (out / "errors_ALS_D.csv").exists()


def test_synth_command(scene_dir, tmp_path):
    out_las = tmp_path / "scene.las"
    out_truth = tmp_path / "truth.csv"
    assert main(["synth", "--spec", str(scene_dir / "scene.cfg"),
                 "--out", str(out_las), "--truth", str(out_truth),
                 "--plot-id", "S1"]) == 0
    cloud = read_las(out_las)
    assert len(cloud) > 100
    assert out_truth.read_text().startswith("plot_id,species,dbh_cm")


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2

    def test_config_error_on_missing_inventory(self, tmp_path):
        cfg = tmp_path / "p.cfg"
        cfg.write_text("[paths]\nout = artifacts\nclouds = clouds\n"
                       "plots = plots.csv\ninventory = nope.csv\n")
        assert main(["run", "--config", str(cfg)]) == 2

    def test_data_error_is_3(self, tmp_path):
        bad = tmp_path / "bad.las"
        bad.write_bytes(b"not a las file at all, padded " + b"\x00" * 300)
        assert main(["ingest", "--input", str(bad), "--out", str(tmp_path / "t")]) == 3

    def test_numerical_error_is_4(self, tmp_path, rng, monkeypatch):
        # force SVR non-convergence through an unreachable iteration cap
        from lidarbiomass import models as m
        real_fit = m.fit_svr

        def crippled(*args, **kwargs):
            kwargs["max_iter"] = 1
            return real_fit(*args, **kwargs)

        monkeypatch.setattr("lidarbiomass.cli.models.fit_svr", crippled)
        features_csv = tmp_path / "metrics.csv"
        with open(features_csv, "w") as fh:
            fh.write("plot_id,system,m1,m2\n")
            for i in range(10):
                fh.write(f"p{i},ULS_D,{i * 1.0},{np.sin(i).item()}\n")
        truth_csv = tmp_path / "plots.csv"
        with open(truth_csv, "w") as fh:
            fh.write("plot_id,AGBt_Mg_ha,AGBm_kg\n")
            for i in range(10):
                fh.write(f"p{i},{20.0 + 10 * i},{50.0 + i}\n")
        code = main(["fit", "--features", str(features_csv),
                     "--truth", str(truth_csv), "--target", "AGBt",
                     "--model", "svr", "--variables", "m1,m2",
                     "--out", str(tmp_path / "m.json")])
        assert code == 4
