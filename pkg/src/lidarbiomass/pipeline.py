"""End-to-end orchestration: synthetic scenes or ingested clouds through
preprocessing, metric extraction, waveform simulation, variable selection,
model fitting and evaluation, with every artifact written under one output
directory.

All randomness flows from the single config seed; per-plot and per-stage
sub-seeds derive deterministically from it, so two runs with the same
config produce byte-identical CSV artifacts.
"""

from __future__ import annotations

import configparser
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import allometry, discrete_metrics, evaluate, features, models, synth, waveform
from .errors import ConfigError, DataError, PipelineError
from .las_io import PointCloud, clip_polygon, read_las, write_las
from .preprocess import (check_time_coherence, classify_ground, dedupe,
                         normalize_heights, remove_noise, write_grid)

STAGES = ("synth", "preprocess", "metrics", "simulate", "inventory",
          "select", "fit", "predict", "evaluate")
DISCRETE_SYSTEMS = ("ULS_D", "ALS_D")
WAVEFORM_SYSTEM = "SLS_FW"


@dataclass
class PipelineConfig:
    out_dir: Path
    seed: int = 123
    threads: int = 1
    systems: tuple[str, ...] = ("ULS_D", "ALS_D", "SLS_FW")
    targets: tuple[str, ...] = ("AGBt", "AGBm")
    model_types: tuple[str, ...] = ("svr", "ols")
    sls_source: str = "ALS_D"
    only: str | None = None
    # file-mode inputs (unused when synth is configured)
    clouds_dir: Path | None = None
    plots_csv: Path | None = None
    inventory_csv: Path | None = None
    density_csv: Path | None = None
    # synthetic-scene ladder
    synth_plots: int = 0
    synth_point_density: float = 25.0
    synth_sparse_density: float = 12.0
    synth_stem_density: tuple[float, float] = (890.0, 1450.0)
    synth_height_max: tuple[float, float] = (8.0, 20.0)
    synth_height_skew: tuple[float, float] = (2.0, 8.0)
    synth_plot_spacing: float = 200.0
    # stage knobs
    knn: int = 8
    noise_sigma: float = 3.0
    ground_cell: float = 1.0
    height_cutoff: float = discrete_metrics.HEIGHT_CUTOFF
    footprint_diameter: float = 25.0
    waveform_bin: float = 0.15
    waveform_noise: float = 0.0
    pulse_fwhm: float = 2.34
    correlation_threshold: float = features.CORRELATION_THRESHOLD
    importance_threshold: float = features.IMPORTANCE_THRESHOLD
    fallback_k: int = features.FALLBACK_TOP_K
    min_vars: int = features.MIN_SELECTED
    max_vars: int = features.MAX_SELECTED
    sigma_grid: tuple[float, ...] = models.DEFAULT_SIGMA_GRID
    cost_grid: tuple[float, ...] = models.DEFAULT_COST_GRID
    epsilon: float = models.DEFAULT_EPSILON
    ols_max_vars: int = 3

    @property
    def synth_mode(self) -> bool:
        return self.synth_plots > 0

    def validate(self) -> None:
        if self.only is not None and self.only not in STAGES:
            raise ConfigError(f"unknown stage {self.only!r}; stages are {STAGES}")
        for system in self.systems:
            if system not in DISCRETE_SYSTEMS + (WAVEFORM_SYSTEM,):
                raise ConfigError(f"unknown system tag {system!r}")
        for target in self.targets:
            if target not in ("AGBt", "AGBm"):
                raise ConfigError(f"unknown target {target!r}")
        for m in self.model_types:
            if m not in ("svr", "ols"):
                raise ConfigError(f"unknown model type {m!r}")
        if not self.synth_mode:
            for name, path in (("clouds", self.clouds_dir), ("plots", self.plots_csv),
                               ("inventory", self.inventory_csv)):
                if path is None:
                    raise ConfigError(f"file mode needs the [paths] {name} entry")
                if not Path(path).exists():
                    raise ConfigError(f"{name} path does not exist: {path}")
        if self.density_csv is not None and not Path(self.density_csv).exists():
            raise ConfigError(f"density path does not exist: {self.density_csv}")


def _get(parser, section, key, default=None):
    if parser.has_option(section, key):
        return parser.get(section, key)
    return default


def _floats(text) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    def p(section, key, default=None):
        return _get(parser, section, key, default)

    out_dir = p("paths", "out")
    if out_dir is None:
        raise ConfigError(f"{path}: [paths] out is required")
    base = path.parent

    def as_path(value):
        return None if value is None else (base / value if not Path(value).is_absolute()
                                           else Path(value))

    cfg = PipelineConfig(
        out_dir=as_path(out_dir),
        seed=int(p("pipeline", "seed", 123)),
        threads=int(p("pipeline", "threads", 1)),
        systems=tuple(str(p("pipeline", "systems", "ULS_D, ALS_D, SLS_FW"))
                      .replace(",", " ").split()),
        targets=tuple(str(p("pipeline", "targets", "AGBt, AGBm")).replace(",", " ").split()),
        model_types=tuple(str(p("pipeline", "models", "svr, ols")).replace(",", " ").split()),
        sls_source=str(p("pipeline", "sls_source", "ALS_D")),
        only=p("pipeline", "only") or None,
        clouds_dir=as_path(p("paths", "clouds")),
        plots_csv=as_path(p("paths", "plots")),
        inventory_csv=as_path(p("paths", "inventory")),
        density_csv=as_path(p("paths", "density")),
        synth_plots=int(p("synth", "n_plots", 0)) if parser.has_section("synth") else 0,
        synth_point_density=float(p("synth", "point_density", 25.0)),
        synth_sparse_density=float(p("synth", "sparse_density", 12.0)),
        synth_stem_density=(float(p("synth", "stem_density_min", 890.0)),
                            float(p("synth", "stem_density_max", 1450.0))),
        synth_height_max=(float(p("synth", "height_max_min", 8.0)),
                          float(p("synth", "height_max_max", 20.0))),
        synth_height_skew=(float(p("synth", "height_skew_min", 2.0)),
                           float(p("synth", "height_skew_max", 8.0))),
        synth_plot_spacing=float(p("synth", "plot_spacing", 200.0)),
        knn=int(p("preprocess", "knn", 8)),
        noise_sigma=float(p("preprocess", "sigma", 3.0)),
        ground_cell=float(p("preprocess", "cell", 1.0)),
        height_cutoff=float(p("metrics", "height_cutoff", discrete_metrics.HEIGHT_CUTOFF)),
        footprint_diameter=float(p("waveform", "diameter", 25.0)),
        waveform_bin=float(p("waveform", "bin_size", 0.15)),
        waveform_noise=float(p("waveform", "noise", 0.0)),
        pulse_fwhm=float(p("waveform", "pulse_fwhm", 2.34)),
        correlation_threshold=float(p("selection", "correlation_threshold",
                                      features.CORRELATION_THRESHOLD)),
        importance_threshold=float(p("selection", "importance_threshold",
                                     features.IMPORTANCE_THRESHOLD)),
        fallback_k=int(p("selection", "fallback_k", features.FALLBACK_TOP_K)),
        min_vars=int(p("selection", "min_vars", features.MIN_SELECTED)),
        max_vars=int(p("selection", "max_vars", features.MAX_SELECTED)),
        sigma_grid=_floats(p("svr", "sigma_grid", "0.2 0.25 0.3 0.5 1 2 3")),
        cost_grid=_floats(p("svr", "cost_grid", "1 2 3 4 5")),
        epsilon=float(p("svr", "epsilon", models.DEFAULT_EPSILON)),
        ols_max_vars=int(p("ols", "max_vars", 3)),
    )
    cfg.validate()
    return cfg


def read_polygons_csv(path) -> dict[str, list[tuple[float, float]]]:
    """plot_id,x,y vertex rows, in order, one polygon per plot."""
    polygons: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                polygons.setdefault(row["plot_id"], []).append(
                    (float(row["x"]), float(row["y"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad polygon row {row}") from exc
    if not polygons:
        raise DataError(f"{path}: no polygons found")
    return polygons


def write_polygons_csv(path, polygons: dict[str, list[tuple[float, float]]]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("plot_id,x,y\n")
        for pid in sorted(polygons):
            for x, y in polygons[pid]:
                fh.write(f"{pid},{x!r},{y!r}\n")


def polygon_centroid(poly) -> tuple[float, float]:
    pts = np.asarray(poly, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    area = cross.sum() / 2.0
    if abs(area) < 1e-12:
        return float(x.mean()), float(y.mean())
    cx = ((x + np.roll(x, -1)) * cross).sum() / (6.0 * area)
    cy = ((y + np.roll(y, -1)) * cross).sum() / (6.0 * area)
    return float(cx), float(cy)


def footprint_centers(poly, spacing: float | None = None) -> list[tuple[float, float]]:
    """Footprint centers for one plot: the centroid by default, or a square
    grid at `spacing` meters covering the polygon (grid mode)."""
    if spacing is None:
        return [polygon_centroid(poly)]
    if spacing <= 0:
        raise ConfigError("footprint spacing must be positive")
    pts = np.asarray(poly, dtype=np.float64)
    xs = np.arange(pts[:, 0].min() + spacing / 2, pts[:, 0].max(), spacing)
    ys = np.arange(pts[:, 1].min() + spacing / 2, pts[:, 1].max(), spacing)
    gx, gy = np.meshgrid(xs, ys)
    from .las_io import points_in_polygon
    inside = points_in_polygon(gx.ravel(), gy.ravel(), poly)
    centers = list(zip(gx.ravel()[inside], gy.ravel()[inside]))
    return [(float(x), float(y)) for x, y in centers] or [polygon_centroid(poly)]


def simulate_plot(cloud, poly, plot_id: str, wf_dir: Path, *,
                  diameter: float = 25.0, bin_size: float = 0.15,
                  noise_std: float = 0.0, pulse_fwhm: float = 2.34,
                  noise_seed: int | None = None,
                  spacing: float | None = None) -> discrete_metrics.MetricVector:
    """Simulate the footprints of one plot, dump the waveforms, and return
    the (aggregated) waveform metric row."""
    per_footprint = []
    for k, center in enumerate(footprint_centers(poly, spacing)):
        fp = waveform.FootprintConfig(
            center=center, diameter=diameter, bin_size=bin_size,
            noise_std=noise_std, pulse_fwhm=pulse_fwhm,
            noise_seed=None if noise_seed is None else noise_seed + k)
        values, undefined, wf = waveform.footprint_metrics(
            cloud, fp, wave_id=f"{plot_id}_f{k}")
        waveform.write_waveform(wf, wf_dir / f"{plot_id}_f{k}.txt")
        per_footprint.append((values, undefined))
    values, undefined = waveform.aggregate_footprints(per_footprint)
    return discrete_metrics.MetricVector(
        plot_id=plot_id, system=WAVEFORM_SYSTEM, values=values,
        undefined=frozenset(undefined))


def _map_ordered(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class PipelineResult:
    out_dir: Path
    completed: list[str] = field(default_factory=list)
    summary_rows: list[dict] = field(default_factory=list)


def _scene_specs(cfg: PipelineConfig) -> list[tuple[str, synth.SceneSpec]]:
    specs = []
    n = cfg.synth_plots
    for i in range(n):
        t = i / max(n - 1, 1)
        stems = cfg.synth_stem_density[0] + t * (cfg.synth_stem_density[1]
                                                 - cfg.synth_stem_density[0])
        hmax = cfg.synth_height_max[0] + t * (cfg.synth_height_max[1]
                                              - cfg.synth_height_max[0])
        skew = cfg.synth_height_skew[0] + t * (cfg.synth_height_skew[1]
                                               - cfg.synth_height_skew[0])
        pid = f"P{i:02d}"
        specs.append((pid, synth.SceneSpec(
            stem_density=stems,
            height_range=(2.5, hmax),
            height_skew=skew,
            point_density=cfg.synth_point_density,
            origin=(0.0, i * cfg.synth_plot_spacing),
            ground_elevation=100.0 + 2.0 * i,
            seed=cfg.seed * 1000 + i,
        )))
    return specs


def run_pipeline(cfg: PipelineConfig, log=print) -> PipelineResult:
    """Run all configured stages; artifacts land under cfg.out_dir.

    A failing stage aborts with a stage-tagged error; artifacts written by
    earlier (and partially by the failing) stages stay on disk.
    """
    cfg.validate()
    result = PipelineResult(out_dir=Path(cfg.out_dir))
    try:
        return _run_stages(cfg, result, log)
    except PipelineError as exc:
        pending = [s for s in STAGES if s not in result.completed]
        stage = pending[0] if pending else STAGES[-1]
        raise type(exc)(f"[stage {stage}] {exc}") from exc


def _run_stages(cfg: PipelineConfig, result: PipelineResult, log) -> PipelineResult:
    out = result.out_dir
    out.mkdir(parents=True, exist_ok=True)

    def stage_done(name: str) -> bool:
        result.completed.append(name)
        log(f"[{name}] done")
        return cfg.only == name

    # ---- synth ----------------------------------------------------------
    polygons: dict[str, list[tuple[float, float]]]
    raw_paths: dict[str, dict[str, Path]] = {s: {} for s in DISCRETE_SYSTEMS}
    inventory_csv = cfg.inventory_csv
    if cfg.synth_mode:
        scene_dir = out / "clouds"
        scene_dir.mkdir(exist_ok=True)
        inventories = []
        polygons = {}
        for i, (pid, spec) in enumerate(_scene_specs(cfg)):
            cloud, inventory = synth.generate(spec, plot_id=pid)
            polygons[pid] = spec.polygon()
            dense_path = scene_dir / f"{pid}_dense.las"
            write_las(cloud, dense_path)
            raw_paths["ULS_D"][pid] = dense_path
            keep = min(cfg.synth_sparse_density / cfg.synth_point_density, 1.0)
            sparse = synth.decimate(cloud, keep, seed=cfg.seed * 1000 + 500 + i)
            sparse_path = scene_dir / f"{pid}_sparse.las"
            write_las(sparse, sparse_path)
            raw_paths["ALS_D"][pid] = sparse_path
            inventories.append(inventory)
        synth.write_truth_csv(out / "truth.csv", inventories)
        inventory_csv = out / "truth.csv"
        write_polygons_csv(out / "polygons.csv", polygons)
        if stage_done("synth"):
            return result
    else:
        polygons = read_polygons_csv(cfg.plots_csv)
        for system in DISCRETE_SYSTEMS:
            sysdir = Path(cfg.clouds_dir) / system
            if not sysdir.is_dir():
                if system in cfg.systems or system == cfg.sls_source:
                    raise DataError(f"missing cloud directory for {system}: {sysdir}")
                continue
            for pid in sorted(polygons):
                las = sysdir / f"{pid}.las"
                if not las.exists():
                    raise DataError(f"missing cloud for plot {pid}: {las}")
                raw_paths[system][pid] = las
        result.completed.append("synth")

    # ---- preprocess ------------------------------------------------------
    prep_dir = out / "prepared"
    prep_dir.mkdir(exist_ok=True)
    needed = [s for s in DISCRETE_SYSTEMS
              if s in cfg.systems or (WAVEFORM_SYSTEM in cfg.systems and s == cfg.sls_source)]
    classified: dict[str, dict[str, PointCloud]] = {s: {} for s in needed}
    normalized: dict[str, dict[str, PointCloud]] = {s: {} for s in needed}

    def prepare(job):
        system, pid = job
        cloud = read_las(raw_paths[system][pid])
        check_time_coherence(cloud)
        cloud = dedupe(cloud)
        cloud = remove_noise(cloud, k=cfg.knn, sigma_mult=cfg.noise_sigma)
        labeled, ground = classify_ground(cloud, cell=cfg.ground_cell)
        norm = normalize_heights(labeled, ground)
        return system, pid, labeled, ground, norm

    jobs = [(system, pid) for system in needed for pid in sorted(raw_paths[system])]
    for system, pid, labeled, ground, norm in _map_ordered(prepare, jobs, cfg.threads):
        classified[system][pid] = labeled
        normalized[system][pid] = norm
        write_las(labeled, prep_dir / f"{pid}_{system}_classified.las")
        write_las(norm, prep_dir / f"{pid}_{system}_normalized.las")
        write_grid(ground, prep_dir / f"{pid}_{system}_ground.grid")
    if stage_done("preprocess"):
        return result

    # ---- discrete metrics -------------------------------------------------
    metric_files: dict[str, Path] = {}
    for system in (s for s in cfg.systems if s in DISCRETE_SYSTEMS):
        rows = []
        for pid in sorted(normalized[system]):
            clipped = clip_polygon(normalized[system][pid], polygons[pid])
            rows.append(discrete_metrics.cloud_metrics(
                clipped, height_cutoff=cfg.height_cutoff, plot_id=pid, system=system))
        metric_files[system] = out / f"metrics_{system}.csv"
        discrete_metrics.write_metrics_csv(metric_files[system], rows)
    if stage_done("metrics"):
        return result

    # ---- waveform simulation ----------------------------------------------
    if WAVEFORM_SYSTEM in cfg.systems:
        wf_dir = out / "waveforms"
        wf_dir.mkdir(exist_ok=True)
        rows = []
        for i, pid in enumerate(sorted(classified[cfg.sls_source])):
            rows.append(simulate_plot(
                classified[cfg.sls_source][pid], polygons[pid], pid, wf_dir,
                diameter=cfg.footprint_diameter, bin_size=cfg.waveform_bin,
                noise_std=cfg.waveform_noise, pulse_fwhm=cfg.pulse_fwhm,
                noise_seed=cfg.seed * 1000 + 900 + 10 * i))
        metric_files[WAVEFORM_SYSTEM] = out / f"metrics_{WAVEFORM_SYSTEM}.csv"
        discrete_metrics.write_metrics_csv(metric_files[WAVEFORM_SYSTEM], rows)
    if stage_done("simulate"):
        return result

    # ---- inventory ---------------------------------------------------------
    density = allometry.read_density_csv(cfg.density_csv) if cfg.density_csv else None
    inventories = allometry.read_inventory_csv(inventory_csv, density=density)
    allometry.write_plot_totals_csv(out / "plots.csv", inventories)
    truth = allometry.read_plot_totals_csv(out / "plots.csv")
    if stage_done("inventory"):
        return result

    # ---- selection ----------------------------------------------------------
    selected: dict[tuple[str, str], list[str]] = {}
    tables: dict[tuple[str, str], features.FeatureTable] = {}
    for system in cfg.systems:
        metric_rows = discrete_metrics.read_metrics_csv(metric_files[system])
        for target in cfg.targets:
            table = features.assemble_table(metric_rows, truth, target)
            reduced, report = features.select_features(
                table,
                correlation_threshold=cfg.correlation_threshold,
                importance_threshold=cfg.importance_threshold,
                fallback_k=cfg.fallback_k, min_vars=cfg.min_vars,
                max_vars=cfg.max_vars)
            selected[(system, target)] = report.selected
            tables[(system, target)] = reduced
            (out / f"selection_{system}_{target}.json").write_text(
                report.to_json() + "\n")
    if stage_done("select"):
        return result

    # ---- fit ------------------------------------------------------------------
    fitted: dict[tuple[str, str, str], object] = {}
    split_info: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}
    for (system, target), table in tables.items():
        train, test = models.split_80_20(len(table.plot_ids), seed=cfg.seed)
        split_info[(system, target)] = (train, test)
        for model_type in cfg.model_types:
            if model_type == "svr":
                grid = models.grid_search(
                    table.data, table.target, table.names,
                    sigma_grid=cfg.sigma_grid, cost_grid=cfg.cost_grid,
                    scheme=models.CVScheme(seed=cfg.seed), epsilon=cfg.epsilon)
                grid.write_surface_csv(out / f"rmse_surface_{system}_{target}.csv")
                model = models.fit_svr(
                    table.data[train], table.target[train], table.names,
                    sigma=grid.best_sigma, cost=grid.best_cost, epsilon=cfg.epsilon)
            else:
                # subset size is limited by both candidates and training rows
                cap = min(cfg.ols_max_vars, len(table.names), len(train) - 2)
                model = models.fit_ols(
                    table.data[train], table.target[train], table.names,
                    max_vars=max(cap, 0))
            fitted[(system, target, model_type)] = model
            models.save_model(model, out / f"model_{system}_{target}_{model_type}.json")
    if stage_done("fit"):
        return result

    # ---- predict -----------------------------------------------------------------
    predictions: dict[tuple[str, str, str], np.ndarray] = {}
    for (system, target, model_type), model in fitted.items():
        table = tables[(system, target)]
        if isinstance(model, models.OLSModel):
            data = table.restricted(list(model.names)).data
        else:
            data = table.data
        pred = model.predict(data)
        predictions[(system, target, model_type)] = pred
        train, _ = split_info[(system, target)]
        with open(out / f"predictions_{system}_{target}_{model_type}.csv", "w") as fh:
            fh.write("plot_id,observed,predicted,role\n")
            for i, pid in enumerate(table.plot_ids):
                role = "train" if i in train else "test"
                fh.write(f"{pid},{float(table.target[i])!r},{float(pred[i])!r},{role}\n")
    if stage_done("predict"):
        return result

    # ---- evaluate -------------------------------------------------------------------
    for target in cfg.targets:
        for model_type in cfg.model_types:
            abs_errors = {}
            for system in cfg.systems:
                table = tables[(system, target)]
                pred = predictions[(system, target, model_type)]
                report = evaluate.EvalReport.build(table.plot_ids, pred, table.target)
                report.write_csv(out / f"errors_{system}_{target}_{model_type}.csv")
                abs_errors[system] = np.abs(pred - table.target)
                model = fitted[(system, target, model_type)]
                row = {
                    "system": system, "target": target, "model": model_type,
                    "variables": ";".join(selected[(system, target)]),
                    "mae": report.mae, "rmse": report.rmse,
                    "mean_pct_error": report.mean_pct_error,
                    "accuracy": report.accuracy,
                }
                if isinstance(model, models.SVRModel):
                    row["sigma"] = model.sigma
                    row["cost"] = model.cost
                else:
                    row["sigma"] = ""
                    row["cost"] = ""
                result.summary_rows.append(row)
            if len(abs_errors) >= 2:
                comparison = evaluate.compare_models(abs_errors)
                comparison.write_csv(out / f"comparison_{target}_{model_type}.csv")
                (out / f"comparison_{target}_{model_type}.txt").write_text(
                    comparison.render() + "\n")

    with open(out / "summary.csv", "w", newline="") as fh:
        cols = ("system", "target", "model", "variables", "sigma", "cost",
                "mae", "rmse", "mean_pct_error", "accuracy")
        fh.write(",".join(cols) + "\n")
        for row in result.summary_rows:
            fh.write(",".join(
                repr(float(row[c])) if isinstance(row[c], float) else str(row[c])
                for c in cols) + "\n")
    stage_done("evaluate")
    return result
