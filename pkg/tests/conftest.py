import numpy as np
import pytest

from lidarbiomass.las_io import PointCloud


def make_cloud(x, y, z, classification=None, return_number=None,
               number_of_returns=None, intensity=None, gps_time=None,
               scale=(0.001, 0.001, 0.001)):
    """Compact PointCloud builder for tests."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    rn = np.ones(n) if return_number is None else np.asarray(return_number)
    nr = rn if number_of_returns is None else np.asarray(number_of_returns)
    return PointCloud(
        x=x,
        y=np.asarray(y, dtype=np.float64),
        z=np.asarray(z, dtype=np.float64),
        intensity=np.full(n, 100) if intensity is None else np.asarray(intensity),
        return_number=rn.astype(np.uint8),
        number_of_returns=np.maximum(nr, rn).astype(np.uint8),
        classification=(np.zeros(n, dtype=np.uint8) if classification is None
                        else np.asarray(classification, dtype=np.uint8)),
        gps_time=gps_time,
        scale=scale,
        offset=(float(np.floor(x.min())) if n else 0.0,
                float(np.floor(np.asarray(y).min())) if n else 0.0,
                float(np.floor(np.asarray(z).min())) if n else 0.0),
    )


def random_cloud(rng, n, extent=100.0, zlow=0.0, zhigh=30.0, gps=False):
    return make_cloud(
        x=rng.uniform(0, extent, n),
        y=rng.uniform(0, extent, n),
        z=rng.uniform(zlow, zhigh, n),
        intensity=rng.integers(1, 1000, n),
        return_number=rng.integers(1, 4, n),
        number_of_returns=np.full(n, 4),
        gps_time=rng.uniform(0, 60, n) if gps else None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(123)
