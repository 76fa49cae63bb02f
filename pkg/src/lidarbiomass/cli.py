"""Command-line interface.

Subcommands mirror the pipeline stages (ingest, preprocess, metrics,
simulate, inventory, select, fit, predict, evaluate, synth) plus `run`,
which drives the whole workflow from one config file. Exit codes:
0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import allometry, discrete_metrics, evaluate, features, models, pipeline, synth
from .errors import ConfigError, DataError, NumericalError
from .las_io import TileGrid, clip_polygon, read_las, tile, write_las
from .preprocess import classify_ground, dedupe, normalize_heights, remove_noise, write_grid

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _cmd_ingest(args) -> None:
    cloud = read_las(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = TileGrid(tile_size=args.tile_size)
    for (ix, iy), part in tile(cloud, grid):
        write_las(part, out / f"tile_{ix}_{iy}.las")
    print(f"wrote {len(tile(cloud, grid))} tiles to {out}")


def _cmd_preprocess(args) -> None:
    tiles = sorted(Path(args.tiles).glob("*.las"))
    if not tiles:
        raise DataError(f"no .las tiles under {args.tiles}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in tiles:
        cloud = dedupe(read_las(path))
        cloud = remove_noise(cloud, k=args.knn, sigma_mult=args.sigma)
        labeled, ground = classify_ground(cloud, cell=args.cell)
        normalized = normalize_heights(labeled, ground)
        write_las(labeled, out / f"{path.stem}_classified.las")
        write_las(normalized, out / f"{path.stem}_normalized.las")
        write_grid(ground, out / f"{path.stem}_ground.grid")
        print(f"{path.name}: {len(cloud)} points prepared")


def _cmd_metrics(args) -> None:
    polygons = pipeline.read_polygons_csv(args.plot)
    cloud = read_las(args.cloud)
    rows = []
    for pid in sorted(polygons):
        clipped = clip_polygon(cloud, polygons[pid])
        rows.append(discrete_metrics.cloud_metrics(
            clipped, height_cutoff=args.height_cutoff, plot_id=pid, system=args.system))
    discrete_metrics.write_metrics_csv(args.out, rows)
    print(f"wrote {len(rows)} metric rows to {args.out}")


def _cmd_simulate(args) -> None:
    polygons = pipeline.read_polygons_csv(args.plot)
    cloud = read_las(args.cloud)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for pid in sorted(polygons):
        rows.append(pipeline.simulate_plot(
            cloud, polygons[pid], pid, out, diameter=args.diameter,
            bin_size=args.bin_size, noise_std=args.noise,
            pulse_fwhm=args.pulse_fwhm, spacing=args.spacing,
            noise_seed=args.seed if args.noise > 0 else None))
    discrete_metrics.write_metrics_csv(out / "metrics_SLS_FW.csv", rows)
    print(f"wrote metric rows for {len(rows)} plots to {out}")


def _cmd_inventory(args) -> None:
    density = allometry.read_density_csv(args.density) if args.density else None
    inventories = allometry.read_inventory_csv(args.trees, density=density,
                                               default_area_m2=args.area)
    allometry.write_plot_totals_csv(args.out, inventories)
    print(f"wrote totals for {len(inventories)} plots to {args.out}")


def _load_table(features_csv, truth_csv, target):
    rows = discrete_metrics.read_metrics_csv(features_csv)
    truth = allometry.read_plot_totals_csv(truth_csv)
    return features.assemble_table(rows, truth, target)


def _cmd_select(args) -> None:
    table = _load_table(args.features, args.truth, args.target)
    _, report = features.select_features(table)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def _variable_names(spec: str) -> list[str]:
    path = Path(spec)
    if path.exists():
        return json.loads(path.read_text())["selected"]
    return [name for name in spec.split(",") if name]


def _cmd_fit(args) -> None:
    table = _load_table(args.features, args.truth, args.target)
    if args.variables:
        table = table.restricted(_variable_names(args.variables))
    else:
        table, report = features.select_features(table)
        print(f"selected variables: {report.selected}")
    if args.model == "svr":
        if args.grid == "default":
            sigma_grid, cost_grid = models.DEFAULT_SIGMA_GRID, models.DEFAULT_COST_GRID
        else:
            sigma_part, cost_part = args.grid.split(":")
            sigma_grid = tuple(float(v) for v in sigma_part.split(","))
            cost_grid = tuple(float(v) for v in cost_part.split(","))
        grid = models.grid_search(table.data, table.target, table.names,
                                  sigma_grid=sigma_grid, cost_grid=cost_grid,
                                  scheme=models.CVScheme(seed=args.seed))
        train, _ = models.split_80_20(len(table.plot_ids), seed=args.seed)
        model = models.fit_svr(table.data[train], table.target[train], table.names,
                               sigma=grid.best_sigma, cost=grid.best_cost)
        print(f"best sigma={grid.best_sigma} cost={grid.best_cost} "
              f"cv_rmse={grid.best_rmse:.4f}")
    else:
        train, _ = models.split_80_20(len(table.plot_ids), seed=args.seed)
        model = models.fit_ols(table.data[train], table.target[train], table.names,
                               max_vars=args.max_vars)
        print(f"ols variables={list(model.names)} loo_rmse={model.loo_rmse:.4f}")
    models.save_model(model, args.out)
    print(f"model written to {args.out}")


def _cmd_predict(args) -> None:
    model = models.load_model(args.model)
    rows = discrete_metrics.read_metrics_csv(args.features)
    rows = sorted(rows, key=lambda r: r.plot_id)
    data = np.array([[r.values[n] for n in model.names] for r in rows])
    pred = model.predict(data)
    lines = ["plot_id,predicted"]
    lines += [f"{r.plot_id},{float(p)!r}" for r, p in zip(rows, pred)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_evaluate(args) -> None:
    pred_rows = []
    with open(args.pred, newline="") as fh:
        pred_rows = list(csv.DictReader(fh))
    obs = {row["plot_id"]: float(row["observed"])
           for row in csv.DictReader(open(args.obs, newline=""))}
    by_system: dict[str, dict[str, float]] = {}
    for row in pred_rows:
        try:
            by_system.setdefault(row["system"], {})[row["plot_id"]] = float(row["predicted"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{args.pred}: bad prediction row {row}") from exc

    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    abs_errors = {}
    for system in (args.compare or sorted(by_system)):
        if system not in by_system:
            raise DataError(f"no predictions for system {system}")
        plot_ids = sorted(set(by_system[system]) & set(obs))
        if not plot_ids:
            raise DataError(f"no overlapping plots for system {system}")
        p = np.array([by_system[system][pid] for pid in plot_ids])
        o = np.array([obs[pid] for pid in plot_ids])
        report = evaluate.EvalReport.build(plot_ids, p, o)
        abs_errors[system] = np.abs(p - o)
        print(f"{system}: MAE={report.mae:.4f} RMSE={report.rmse:.4f} "
              f"mean%err={report.mean_pct_error:.2f} accuracy={report.accuracy:.2f}")
        if out:
            report.write_csv(out / f"errors_{system}.csv")
    if len(abs_errors) >= 2:
        table = evaluate.compare_models(abs_errors)
        print(table.render())
        if out:
            table.write_csv(out / "comparison.csv")


def _scene_from_cfg(path) -> synth.SceneSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not Path(path).exists():
        raise ConfigError(f"scene config not found: {path}")
    parser.read(path)
    if not parser.has_section("scene"):
        raise ConfigError(f"{path}: missing [scene] section")
    s = parser["scene"]
    return synth.SceneSpec(
        plot_width=s.getfloat("plot_width", 20.0),
        plot_length=s.getfloat("plot_length", 50.0),
        stem_density=s.getfloat("stem_density", 1000.0),
        height_range=(s.getfloat("height_min", 2.5), s.getfloat("height_max", 10.0)),
        height_skew=s.getfloat("height_skew", 2.0),
        point_density=s.getfloat("point_density", 25.0),
        penetration=s.getfloat("penetration", 0.3),
        ground_elevation=s.getfloat("ground_elevation", 100.0),
        ground_slope=(s.getfloat("slope_x", 0.0), s.getfloat("slope_y", 0.0)),
        wood_density=s.getfloat("wood_density", 0.6),
        seed=s.getint("seed", 0),
    )


def _cmd_synth(args) -> None:
    spec = _scene_from_cfg(args.spec)
    cloud, inventory = synth.generate(spec, plot_id=args.plot_id)
    write_las(cloud, args.out)
    synth.write_truth_csv(args.truth, [inventory])
    print(f"scene: {len(cloud)} points, {len(inventory.trees)} trees -> {args.out}")


def _cmd_run(args) -> None:
    cfg = pipeline.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.only is not None:
        cfg.only = args.only
    result = pipeline.run_pipeline(cfg)
    print(f"stages completed: {', '.join(result.completed)}")
    if result.summary_rows:
        print(f"summary written to {result.out_dir / 'summary.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarbiomass",
        description="LiDAR-based forest biomass and carbon estimation pipeline")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--threads", type=int, default=None, help="worker threads")
    parser.add_argument("--config", default=None, help="pipeline config (for `run`)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="tile a LAS acquisition")
    p.add_argument("--input", required=True)
    p.add_argument("--tile-size", type=float, default=125.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("preprocess", help="dedupe, denoise, classify and normalize tiles")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--knn", type=int, default=8)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--cell", type=float, default=1.0)
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("metrics", help="discrete metric suite for plot polygons")
    p.add_argument("--plot", required=True, help="polygon CSV (plot_id,x,y)")
    p.add_argument("--cloud", required=True, help="normalized LAS cloud")
    p.add_argument("--system", required=True)
    p.add_argument("--height-cutoff", type=float, default=discrete_metrics.HEIGHT_CUTOFF)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_metrics)

    p = sub.add_parser("simulate", help="simulate large-footprint waveforms")
    p.add_argument("--cloud", required=True, help="classified, un-normalized LAS cloud")
    p.add_argument("--plot", required=True, help="polygon CSV (plot_id,x,y)")
    p.add_argument("--diameter", type=float, default=25.0)
    p.add_argument("--bin-size", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--pulse-fwhm", type=float, default=2.34)
    p.add_argument("--spacing", type=float, default=None,
                   help="grid mode: footprint spacing in meters "
                        "(default: one footprint at the plot centroid)")
    p.add_argument("--seed", type=int, default=123, dest="seed")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("inventory", help="per-plot biomass totals from a tree list")
    p.add_argument("--trees", required=True)
    p.add_argument("--density", default=None)
    p.add_argument("--area", type=float, default=1000.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_inventory)

    p = sub.add_parser("select", help="variable selection workflow")
    p.add_argument("--features", required=True)
    p.add_argument("--truth", required=True, help="plot totals CSV")
    p.add_argument("--target", default="AGBt", choices=("AGBt", "AGBm"))
    p.add_argument("--seed", type=int, default=123, dest="seed")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("fit", help="fit an SVR or OLS model")
    p.add_argument("--features", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--target", default="AGBt", choices=("AGBt", "AGBm"))
    p.add_argument("--model", default="svr", choices=("svr", "ols"))
    p.add_argument("--seed", type=int, default=123, dest="seed")
    p.add_argument("--grid", default="default",
                   help="'default' or 'sigma1,sigma2:cost1,cost2'")
    p.add_argument("--variables", default=None,
                   help="selection JSON or comma-separated names")
    p.add_argument("--max-vars", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fit)

    p = sub.add_parser("predict", help="apply a stored model to new metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("evaluate", help="error metrics and system comparison")
    p.add_argument("--pred", required=True, help="CSV: plot_id,system,predicted")
    p.add_argument("--obs", required=True, help="CSV: plot_id,observed")
    p.add_argument("--compare", nargs="*", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--spec", required=True, help="scene config (INI, [scene] section)")
    p.add_argument("--out", required=True, help="output LAS path")
    p.add_argument("--truth", required=True, help="output truth CSV path")
    p.add_argument("--plot-id", default="plot")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--only", default=None, choices=pipeline.STAGES,
                   help="stop after this stage")
    p.add_argument("--seed", type=int, default=None, dest="seed")
    p.add_argument("--threads", type=int, default=None, dest="threads")
    p.set_defaults(fn=_cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
