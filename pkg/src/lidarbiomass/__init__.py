"""LiDAR point clouds in, plot-level biomass and carbon estimates out.

The package covers the whole chain: LAS parsing and tiling, point-cloud
preparation, discrete canopy/intensity metrics, large-footprint waveform
simulation with its metric suite, allometric bookkeeping, variable
selection, OLS/SVR regression with seeded cross-validation, and error
evaluation. `lidarbiomass.pipeline.run_pipeline` (or the `lidarbiomass`
CLI) wires the stages together.
"""

__version__ = "0.1.0"

from .las_io import PointCloud, PointRecord, TileGrid, read_las, write_las  # noqa: F401
from .preprocess import GroundModel, NormalizedCloud  # noqa: F401
from .discrete_metrics import MetricVector, cloud_metrics  # noqa: F401
from .waveform import FootprintConfig, Waveform, simulate_footprint  # noqa: F401
from .allometry import PlotInventory, TreeRecord, carbon, co2e, tree_agb  # noqa: F401
from .features import FeatureTable, SelectionReport, select_features  # noqa: F401
from .models import CVScheme, OLSModel, SVRModel, fit_ols, fit_svr, grid_search  # noqa: F401
from .evaluate import EvalReport, compare_models, mae, pct_error, rmse  # noqa: F401
from .synth import SceneSpec, generate  # noqa: F401
